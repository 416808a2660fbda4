//! Dice objectives, the Adam optimizer and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result, TensorError};
use crate::params::ModelParams;
use crate::tensor::{Scalar, Tensor};

/// Default smoothing for [`soft_dice_loss`].
pub const DICE_EPS: f64 = 1e-5;

/// Threshold used to binarize probabilities before [`dice_score`].
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// `1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)`, evaluated without a tape.
pub fn soft_dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<T, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::dim(
            "soft_dice_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let (mut inter, mut denom) = (T::zero(), T::zero());
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        inter += p * g;
        denom += p * p + g * g;
    }
    Ok(T::one() - (T::of(2.0) * inter + eps) / (denom + eps))
}

/// Hard Dice `2|A & B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice_score<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(TensorError::dim("dice_score", format!("{:?} vs {:?}", pred.shape(), truth.shape())).into());
    }
    let (mut both, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(truth.data()) {
        let (p, g) = (as_bit(p)?, as_bit(g)?);
        both += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

fn as_bit<T: Scalar>(v: T) -> Result<bool> {
    if v == T::zero() {
        Ok(false)
    } else if v == T::one() {
        Ok(true)
    } else {
        Err(Error::Validation(format!("mask value {v:?} is not binary")))
    }
}

/// `1` where `p > threshold`, else `0`.
pub fn binarize<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Tensor<T> {
    probs.map(|p| if p.as_f64() > threshold { T::one() } else { T::zero() })
}

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::Usage(format!("epoch {epoch} outside 0..={total_epochs}")));
    }
    let progress = epoch as f64 / total_epochs as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments mirroring `params`.
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape()))).collect();
        AdamState { m: zeros(), v: zeros(), step: 0, config: AdamConfig::default() }
    }

    /// Applies one bias-corrected Adam update to every parameter.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| Error::Usage(format!("no gradient for parameter {name:?}")))?;
            if g.shape() != p.shape() {
                return Err(TensorError::dim(
                    "adam_step",
                    format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                )
                .into());
            }
            if self.m.get(name).map(Tensor::shape) != Some(p.shape()) {
                return Err(TensorError::dim("adam_step", format!("optimizer state does not mirror {name}")).into());
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (c1, c2, lr, eps) = (T::of(c1), T::of(c2), T::of(lr), T::of(eps));
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).expect("checked above").data_mut();
            let v = self.v.get_mut(name).expect("checked above").data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
