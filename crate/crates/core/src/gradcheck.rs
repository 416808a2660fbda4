//! Central finite-difference checks of every differentiable op and of the
//! end-to-end network, in `f64`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{Mode, NormOptions, NormStats, Tape, Var};
use crate::error::Result;
use crate::params::BoundParams;
use crate::rng;
use crate::tensor::Tensor;
use crate::unet::{ModelConfig, UNet};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Largest accepted `|a - n| / max(1, |a| + |n|)`.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar inputs compared.
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs() + numeric.abs())
}

fn random(shape: &[usize], name: &str, stream: &str, scale: f64) -> Tensor<f64> {
    let mut r = rng::stream(0, stream, name);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()).expect("shape")
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(shape: &[usize], name: &str) -> Tensor<f64> {
    random(shape, name, "gradcheck-input", 1.0).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Compares the tape gradient of `sum(build(inputs) * R)` for fixed random `R`
/// against central differences, for every scalar of every input.
pub fn check_op<F>(name: &str, inputs: &[Tensor<f64>], build: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let weights = random(tape.value(out).shape(), name, "gradcheck-weights", 1.0);
    let w = tape.constant(weights.clone());
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut values = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let original = inputs[i].data()[j];
            values[i].data_mut()[j] = original + STEP;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = original - STEP;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
            checked += 1;
        }
    }
    Ok(CheckOutcome { name: name.to_string(), max_rel_error: worst, checked, passed: worst < TOLERANCE })
}

fn bind(names: &[String], vars: &[Var]) -> BoundParams {
    BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// End-to-end check of a depth-2 network on `[2, 1, 8, 8]` inputs with all
/// parameters randomized so every path carries gradient.
pub fn check_network(conditioned: bool) -> Result<CheckOutcome> {
    let config = ModelConfig {
        depth: 2,
        base_channels: 4,
        conditioning_size: if conditioned { 2 } else { 0 },
        film_hidden: 4,
        ..ModelConfig::default()
    };
    let net = UNet::new(config)?;
    let name = if conditioned { "unet_film_end_to_end" } else { "unet_baseline_end_to_end" };
    let params = net.init_params::<f64>(1);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor<f64>> = params
        .iter()
        .map(|(n, t)| {
            let noise = random(t.shape(), n, "gradcheck-params", 0.3);
            Tensor::new(t.shape(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).expect("shape")
        })
        .collect();
    inputs.push(random(&[2, 1, 8, 8], name, "gradcheck-input", 1.0));
    let z = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    check_op(name, &inputs, |tape, vars| {
        let (image, params) = vars.split_last().expect("image is last");
        let bound = bind(&names, params);
        let mut stats = net.init_stats::<f64>();
        net.forward(tape, &bound, &mut stats, *image, conditioned.then_some(&z), Mode::Train)
    })
}

/// A pointwise square whose backward rule is deliberately wrong (`3x`
/// instead of `2x`). The check must fail.
pub fn corrupted_rule_check() -> Result<CheckOutcome> {
    let x = random(&[3, 4], "corrupted", "gradcheck-input", 1.0);
    check_op("corrupted_square", &[x], |tape, v| Ok(tape.pointwise(v[0], |a| a * a, |a| 3.0 * a)?))
}

/// Every per-op check plus the two end-to-end network checks.
pub fn run_suite() -> Result<Vec<CheckOutcome>> {
    let r = |shape: &[usize], name: &str| random(shape, name, "gradcheck-input", 1.0);
    let mut out = Vec::new();
    out.push(check_op("conv2d_3x3_pad1", &[r(&[2, 3, 5, 5], "c1x"), r(&[4, 3, 3, 3], "c1k"), r(&[4], "c1b")], |t, v| {
        Ok(t.conv2d(v[0], v[1], v[2], 1, 1)?)
    })?);
    out.push(check_op("conv2d_3x3_stride2", &[r(&[1, 2, 7, 7], "c2x"), r(&[3, 2, 3, 3], "c2k"), r(&[3], "c2b")], |t, v| {
        Ok(t.conv2d(v[0], v[1], v[2], 2, 1)?)
    })?);
    out.push(check_op("conv2d_1x1", &[r(&[2, 3, 4, 4], "c3x"), r(&[2, 3, 1, 1], "c3k"), r(&[2], "c3b")], |t, v| {
        Ok(t.conv2d(v[0], v[1], v[2], 1, 0)?)
    })?);
    out.push(check_op("maxpool2", &[r(&[2, 2, 4, 6], "mp")], |t, v| Ok(t.maxpool2(v[0])?))?);
    out.push(check_op("upsample_nearest2", &[r(&[2, 2, 3, 2], "up")], |t, v| Ok(t.upsample_nearest2(v[0])?))?);
    out.push(check_op("channel_norm_train", &[r(&[2, 3, 3, 3], "cnt")], |t, v| {
        let mut stats = NormStats::new(3);
        Ok(t.channel_norm(v[0], &mut stats, Mode::Train, NormOptions::default())?)
    })?);
    out.push(check_op("channel_norm_infer", &[r(&[2, 3, 3, 3], "cni")], |t, v| {
        let mut stats = NormStats { mean: vec![0.2, -0.1, 0.0], var: vec![1.5, 0.5, 2.0] };
        Ok(t.channel_norm(v[0], &mut stats, Mode::Infer, NormOptions::default())?)
    })?);
    out.push(check_op("relu", &[away_from_zero(&[2, 3, 4], "relu")], |t, v| Ok(t.relu(v[0])?))?);
    out.push(check_op("sigmoid", &[r(&[2, 3, 4], "sig")], |t, v| Ok(t.sigmoid(v[0])?))?);
    out.push(check_op("add", &[r(&[3, 4], "add1"), r(&[3, 4], "add2")], |t, v| Ok(t.add(v[0], v[1])?))?);
    out.push(check_op("mul", &[r(&[3, 4], "mul1"), r(&[3, 4], "mul2")], |t, v| Ok(t.mul(v[0], v[1])?))?);
    out.push(check_op("scale", &[r(&[3, 4], "scale")], |t, v| Ok(t.scale(v[0], -1.7)?))?);
    out.push(check_op("sum", &[r(&[2, 3, 2], "sum")], |t, v| Ok(t.sum(v[0])?))?);
    out.push(check_op("concat_channels", &[r(&[2, 1, 3, 3], "cat1"), r(&[2, 2, 3, 3], "cat2")], |t, v| {
        Ok(t.concat_channels(v[0], v[1])?)
    })?);
    out.push(check_op("channel_affine_shared", &[r(&[2, 3, 2, 2], "caf"), r(&[3], "cag"), r(&[3], "cab")], |t, v| {
        Ok(t.channel_affine(v[0], v[1], v[2])?)
    })?);
    out.push(check_op(
        "channel_affine_per_sample",
        &[r(&[2, 3, 2, 2], "cpf"), r(&[2, 3], "cpg"), r(&[2, 3], "cpb")],
        |t, v| Ok(t.channel_affine(v[0], v[1], v[2])?),
    )?);
    out.push(check_op("linear", &[r(&[3, 4], "linx"), r(&[5, 4], "linw"), r(&[5], "linb")], |t, v| {
        Ok(t.linear(v[0], v[1], v[2])?)
    })?);
    let target = Tensor::new(&[2, 1, 3, 3], (0..18).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect())?;
    let probs = r(&[2, 1, 3, 3], "dice").map(|v| 1.0 / (1.0 + (-v).exp()));
    out.push(check_op("soft_dice_loss", &[probs], |t, v| Ok(t.soft_dice_loss(v[0], &target, 1e-5)?))?);
    out.push(check_op("pointwise_tanh", &[r(&[3, 3], "tanh")], |t, v| {
        Ok(t.pointwise(v[0], f64::tanh, |a| 1.0 - a.tanh().powi(2))?)
    })?);
    out.push(check_network(false)?);
    out.push(check_network(true)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(0.5, 0.5), 0.0);
        assert_eq!(relative_error(0.0, 1e-5), 1e-5);
        assert!((relative_error(100.0, 101.0) - 1.0 / 201.0).abs() < 1e-15);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let outcome = corrupted_rule_check().unwrap();
        assert!(!outcome.passed);
        assert!(outcome.max_rel_error > 0.1);
    }

    #[test]
    fn small_ops_pass() {
        let x = away_from_zero(&[2, 2, 2, 2], "t");
        let outcome = check_op("relu_small", &[x], |t, v| Ok(t.relu(v[0])?)).unwrap();
        assert!(outcome.passed, "{outcome:?}");
        assert_eq!(outcome.checked, 16);
    }
}
