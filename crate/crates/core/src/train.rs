//! Mini-batch training, evaluation of saved runs, and model inference.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TrainState};
use crate::config::RunConfig;
use crate::data::{augment_sample, perturb_ground_truth, read_dataset, standardize, Dataset, Sample};
use crate::error::{Error, Result};
use crate::film::{ConditioningVector, Vocabulary};
use crate::metrics::{evaluate_model, EvalReport, Predictor};
use crate::optim::{cosine_lr, BINARIZE_THRESHOLD, DICE_EPS};
use crate::params::{ModelParams, RunningStats};
use crate::rng::{derive_seed, permutation};
use crate::tensor::Tensor;
use crate::unet::UNet;

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub best: TrainState,
    pub last: TrainState,
}

/// A trained network bound to its weights, usable as a [`Predictor`].
pub struct ModelPredictor<'a> {
    pub net: &'a UNet,
    pub params: &'a ModelParams<f32>,
    pub stats: &'a RunningStats<f32>,
    pub vocabulary: &'a Vocabulary,
    pub standardize: bool,
}

impl Predictor for ModelPredictor<'_> {
    fn vocabulary(&self) -> &Vocabulary {
        self.vocabulary
    }

    fn predict(&self, images: &Tensor<f32>, contrasts: &[&str]) -> Result<Tensor<f32>> {
        let [n, _, _, _] = images.dims4("predict")?;
        let images = if self.standardize {
            let per = images.len() / n.max(1);
            let data: Vec<f32> = images
                .data()
                .chunks(per)
                .flat_map(|c| standardize(&Tensor::new(&[per], c.to_vec()).expect("1-d")).into_data())
                .collect();
            Tensor::new(images.shape(), data)?
        } else {
            images.clone()
        };
        let z = conditioning_batch(self.net, self.vocabulary, contrasts)?;
        self.net.predict(self.params, self.stats, &images, z.as_ref())
    }
}

fn conditioning_batch(net: &UNet, vocabulary: &Vocabulary, contrasts: &[&str]) -> Result<Option<Tensor<f32>>> {
    if !net.config().is_conditioned() {
        return Ok(None);
    }
    let zs = contrasts.iter().map(|c| vocabulary.encode(c)).collect::<Result<Vec<_>>>()?;
    Ok(Some(ConditioningVector::batch(&zs)?))
}

/// Checks a config against its dataset before any training starts.
pub fn preflight(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    cfg.validate()?;
    cfg.vocabulary.ensure_matches(&dataset.vocabulary)?;
    if dataset.mode != cfg.mode {
        return Err(Error::Config(format!("config expects {} data but the dataset is {}", cfg.mode, dataset.mode)));
    }
    if dataset.samples.is_empty() {
        return Err(Error::Validation("dataset has no samples".into()));
    }
    Ok(())
}

/// Loads the dataset named by `cfg.data` and checks it against `cfg`.
pub fn load_for(cfg: &RunConfig) -> Result<Dataset> {
    let cfg = cfg.resolve_calibration()?;
    cfg.validate()?;
    let dataset = read_dataset(&cfg.data)?;
    preflight(&cfg, &dataset)?;
    Ok(dataset)
}

/// The `[N,1,H,W]` images, masks and contrasts of one prepared mini-batch.
struct Batch {
    images: Tensor<f32>,
    masks: Tensor<f32>,
    contrasts: Vec<String>,
}

fn prepare(sample: &Sample, cfg: &RunConfig, epoch_seed: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let sample = match &cfg.augmentation {
        Some(a) => augment_sample(sample, epoch_seed, a)?,
        None => sample.clone(),
    };
    let mask = if cfg.perturb_ground_truth {
        perturb_ground_truth(&sample.mask, derive_seed(epoch_seed, "rater", &sample.id), &cfg.rater)?
    } else {
        sample.mask
    };
    let image = if cfg.standardize { standardize(&sample.image) } else { sample.image };
    Ok((image, mask))
}

fn make_batch(samples: &[&Sample], cfg: &RunConfig, epoch_seed: u64) -> Result<Batch> {
    let prepared = crate::parallel::map(samples, cfg.threads, |s| prepare(s, cfg, epoch_seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<&Tensor<f32>> = prepared.iter().map(|p| &p.0).collect();
    let masks: Vec<&Tensor<f32>> = prepared.iter().map(|p| &p.1).collect();
    Ok(Batch {
        images: Tensor::stack(&images)?,
        masks: Tensor::stack(&masks)?,
        contrasts: samples.iter().map(|s| s.contrast.clone()).collect(),
    })
}

fn train_step(net: &UNet, state: &mut TrainState, batch: &Batch, vocabulary: &Vocabulary, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape);
    let x = tape.constant(batch.images.clone());
    let contrasts: Vec<&str> = batch.contrasts.iter().map(String::as_str).collect();
    let z = conditioning_batch(net, vocabulary, &contrasts)?;
    let probs = net.forward(&mut tape, &bound, &mut state.stats, x, z.as_ref(), Mode::Train)?;
    let loss = tape.soft_dice_loss(probs, &batch.masks, DICE_EPS as f32)?;
    let value = tape.value(loss).item().expect("soft Dice is a scalar") as f64;
    if !value.is_finite() {
        return Err(Error::Validation(format!("training loss became {value}")));
    }
    let grads = tape.backward(loss)?;
    state.adam.step(&mut state.params, &bound.collect(&grads), lr)?;
    Ok(value)
}

/// Mean per-sample Dice of `state` on `samples`.
pub fn evaluate_state(
    net: &UNet,
    state: &TrainState,
    cfg: &RunConfig,
    samples: &[&Sample],
) -> Result<EvalReport> {
    let predictor = ModelPredictor {
        net,
        params: &state.params,
        stats: &state.stats,
        vocabulary: &cfg.vocabulary,
        standardize: cfg.standardize,
    };
    evaluate_model(&predictor, &cfg.vocabulary, samples, BINARIZE_THRESHOLD, &cfg.fingerprint_hex(), cfg.seed)
}

/// Trains per `cfg` on the train partition of `dataset`, selecting the
/// epoch with the best validation Dice. Writes `config.json`, `log.csv`,
/// `best.ckpt` and `final.ckpt` into `cfg.out`.
pub fn train(cfg: &RunConfig, dataset: &Dataset, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainResult> {
    let cfg = cfg.resolve_calibration()?;
    preflight(&cfg, dataset)?;
    let split = dataset.split(cfg.seed)?;
    let train_set = dataset.subset(&split.train);
    let val_set = dataset.subset(&split.val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation("train or validation partition is empty".into()));
    }
    let net = UNet::new(cfg.model_config())?;
    let mut state = TrainState::fresh(&net, derive_seed(cfg.seed, "init", "model"));
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    cfg.save(&cfg.out.join(CONFIG_FILE))?;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, TrainState)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)?;
        let epoch_seed = derive_seed(cfg.seed, "epoch", &epoch.to_string());
        let order = permutation(train_set.len(), cfg.seed, "shuffle", &epoch.to_string());
        let shuffled: Vec<&Sample> = order.iter().map(|&i| train_set[i]).collect();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in shuffled.chunks(cfg.batch_size) {
            let batch = make_batch(chunk, &cfg, epoch_seed)?;
            loss_sum += train_step(&net, &mut state, &batch, &cfg.vocabulary, lr)?;
            batches += 1;
        }
        let val_dice = evaluate_state(&net, &state, &cfg, &val_set)?.overall;
        let entry = EpochLog { epoch: epoch + 1, train_loss: loss_sum / batches as f64, val_dice, lr };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|b| val_dice > b.1) {
            best = Some((epoch + 1, val_dice, state.clone()));
        }
    }
    let (best_epoch, best_val_dice, best_state) = best.expect("at least one epoch");
    let fingerprint = cfg.fingerprint();
    write_checkpoint(&cfg.out.join(BEST_CHECKPOINT), &Checkpoint::from_state(&best_state, fingerprint))?;
    write_checkpoint(&cfg.out.join(FINAL_CHECKPOINT), &Checkpoint::from_state(&state, fingerprint))?;
    write_log(&cfg.out.join(LOG_FILE), &log)?;
    Ok(TrainResult {
        dir: cfg.out.clone(),
        config: cfg,
        log,
        best_epoch,
        best_val_dice,
        best: best_state,
        last: state,
    })
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut csv = String::from("epoch,train_loss,val_dice,lr\n");
    for e in log {
        csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_dice, e.lr));
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}

/// Which partition of the re-derived split to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!("unknown partition {other:?} (train | val | test)"))),
        }
    }
}

/// Loads a checkpoint and the `config.json` beside it, refusing to proceed
/// unless the stored fingerprint matches the config.
pub fn load_run(checkpoint: &Path) -> Result<(RunConfig, UNet, TrainState)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let ck = read_checkpoint(checkpoint)?;
    if ck.fingerprint != cfg.fingerprint() {
        return Err(Error::Validation(format!(
            "checkpoint fingerprint {} does not match config fingerprint {}",
            ck.fingerprint_hex(),
            cfg.fingerprint_hex()
        )));
    }
    let net = UNet::new(cfg.model_config())?;
    let state = ck.into_state(&net)?;
    Ok((cfg, net, state))
}

/// Evaluates a saved run on one partition of `dataset` (split re-derived
/// from the run's seed).
pub fn evaluate_run(
    cfg: &RunConfig,
    net: &UNet,
    state: &TrainState,
    dataset: &Dataset,
    partition: Partition,
) -> Result<EvalReport> {
    cfg.vocabulary.ensure_matches(&dataset.vocabulary)?;
    let split = dataset.split(cfg.seed)?;
    let ids = match partition {
        Partition::Train => &split.train,
        Partition::Val => &split.val,
        Partition::Test => &split.test,
    };
    evaluate_state(net, state, cfg, &dataset.subset(ids))
}
