//! 2D U-Net with per-channel affine slots after every normalized convolution.
//!
//! Each level runs two sub-blocks of `conv3x3 -> channel_norm -> affine -> relu`.
//! The affine slot holds learned `(gamma, beta)` vectors in the baseline model
//! and FiLM-generated `(gamma(z), beta(z))` when conditioning is enabled.
//! Decoder levels upsample by nearest neighbour, apply a 3x3 projection and
//! concatenate the matching encoder output before their two sub-blocks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, NormOptions, NormStats, Tape, Var};
use crate::error::{Error, Result, TensorError};
use crate::film::FilmGenerator;
use crate::params::{BoundParams, ModelParams, RunningStats};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of pooling levels (2..=4).
    pub depth: usize,
    /// Channels at the top level; doubled per level.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Length of the conditioning vector; 0 disables FiLM.
    pub conditioning_size: usize,
    pub film_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 3,
            base_channels: 16,
            in_channels: 1,
            out_channels: 1,
            conditioning_size: 0,
            film_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(2..=4).contains(&self.depth) {
            return bad(format!("depth must be 2, 3 or 4, got {}", self.depth));
        }
        if self.base_channels < 4 {
            return bad(format!("base_channels must be at least 4, got {}", self.base_channels));
        }
        if self.in_channels != 1 || self.out_channels != 1 {
            return bad("only single-channel input and output are supported".into());
        }
        if self.conditioning_size == 1 {
            return bad("conditioning_size must be 0 or at least 2".into());
        }
        if self.conditioning_size > 0 && self.film_hidden == 0 {
            return bad("film_hidden must be positive when conditioning is enabled".into());
        }
        Ok(())
    }

    pub fn is_conditioned(&self) -> bool {
        self.conditioning_size > 0
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// One normalized conv sub-block and its affine slot.
#[derive(Clone, Debug, PartialEq, Eq)]
struct SubBlock {
    path: String,
    index: usize,
    in_channels: usize,
    out_channels: usize,
    site: usize,
}

impl SubBlock {
    fn conv(&self, part: &str) -> String {
        format!("{}.conv{}.{part}", self.path, self.index)
    }

    fn affine(&self, part: &str) -> String {
        format!("{}.affine{}.{part}", self.path, self.index)
    }

    fn norm(&self) -> String {
        format!("{}.norm{}", self.path, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

/// The network layout derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct UNet {
    config: ModelConfig,
    blocks: Vec<SubBlock>,
    generators: Vec<FilmGenerator>,
    norm: NormOptions<f64>,
}

impl UNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut push_level = |path: String, cin: usize, cout: usize| {
            for index in 1..=2 {
                let site = blocks.len();
                let in_channels = if index == 1 { cin } else { cout };
                blocks.push(SubBlock { path: path.clone(), index, in_channels, out_channels: cout, site });
            }
        };
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            push_level(format!("enc.{level}"), cin, config.channels(level));
            cin = config.channels(level);
        }
        push_level("mid".into(), cin, config.channels(config.depth));
        for level in (0..config.depth).rev() {
            push_level(format!("dec.{level}"), 2 * config.channels(level), config.channels(level));
        }
        let generators = if config.is_conditioned() {
            blocks
                .iter()
                .map(|b| FilmGenerator::new(b.site, config.conditioning_size, config.film_hidden, b.out_channels))
                .collect()
        } else {
            Vec::new()
        };
        Ok(UNet { config, blocks, generators, norm: NormOptions::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Number of affine (FiLM) sites.
    pub fn sites(&self) -> usize {
        self.blocks.len()
    }

    pub fn generators(&self) -> &[FilmGenerator] {
        &self.generators
    }

    fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push((b.conv("kernel"), vec![b.out_channels, b.in_channels, 3, 3], Init::HeNormal { fan_in: b.in_channels * 9 }));
            out.push((b.conv("bias"), vec![b.out_channels], Init::Zeros));
            if !self.config.is_conditioned() {
                out.push((b.affine("gamma"), vec![b.out_channels], Init::Ones));
                out.push((b.affine("beta"), vec![b.out_channels], Init::Zeros));
            }
        }
        for level in 0..self.config.depth {
            let (cin, cout) = (self.config.channels(level + 1), self.config.channels(level));
            out.push((format!("dec.{level}.up.kernel"), vec![cout, cin, 3, 3], Init::HeNormal { fan_in: cin * 9 }));
            out.push((format!("dec.{level}.up.bias"), vec![cout], Init::Zeros));
        }
        let c0 = self.config.channels(0);
        out.push(("head.kernel".into(), vec![self.config.out_channels, c0, 1, 1], Init::HeNormal { fan_in: c0 }));
        out.push(("head.bias".into(), vec![self.config.out_channels], Init::Zeros));
        for g in &self.generators {
            for (name, shape) in g.param_shapes() {
                let init = if name.ends_with("h.weight") {
                    Init::HeNormal { fan_in: g.input }
                } else if name.ends_with("gamma.bias") {
                    Init::Ones
                } else {
                    Init::Zeros
                };
                out.push((name, shape, init));
            }
        }
        out
    }

    /// Sorted names of all trainable tensors.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.param_layout().into_iter().map(|(n, _, _)| n).collect();
        names.sort();
        names
    }

    /// `(name, channels)` of every normalization site.
    pub fn norm_sites(&self) -> Vec<(String, usize)> {
        self.blocks.iter().map(|b| (b.norm(), b.out_channels)).collect()
    }

    /// He-normal kernels, zero biases, identity affine slots and identity
    /// FiLM output (zero head weights, gamma bias one, beta bias zero).
    /// Each tensor draws from its own stream, so backbone weights do not depend
    /// on whether FiLM generators are present.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        let mut params = ModelParams::new();
        for (name, shape, init) in self.param_layout() {
            let tensor = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, T::one()),
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let mut rng = rng::stream(seed, "init", &name);
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal))).collect();
                    Tensor::new(&shape, data).expect("layout shapes are consistent")
                }
            };
            params.insert(name, tensor);
        }
        params
    }

    pub fn init_stats<T: Scalar>(&self) -> RunningStats<T> {
        let mut stats = RunningStats::new();
        for (name, c) in self.norm_sites() {
            stats.insert(name, NormStats::new(c));
        }
        stats
    }

    /// Fails unless `params` holds exactly the tensors this layout expects, with matching shapes.
    pub fn check_params<T: Scalar>(&self, params: &ModelParams<T>) -> Result<()> {
        let layout = self.param_layout();
        let missing: Vec<String> =
            layout.iter().filter(|(n, _, _)| !params.contains(n)).map(|(n, _, _)| n.clone()).collect();
        let extra: Vec<String> = params
            .names()
            .filter(|n| !layout.iter().any(|(l, _, _)| l == n))
            .map(str::to_string)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::NameSet { missing, extra });
        }
        for (name, shape, _) in layout {
            let actual = params.get(&name).expect("checked above").shape();
            if actual != shape.as_slice() {
                return Err(TensorError::dim("params", format!("{name} has shape {actual:?}, expected {shape:?}")).into());
            }
        }
        Ok(())
    }

    /// Records the forward pass and returns per-pixel probabilities `[N, 1, H, W]`.
    ///
    /// `z` is the `[N, conditioning_size]` one-hot batch; it is required iff
    /// the model is conditioned. `H` and `W` must be divisible by `2^depth`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        stats: &mut RunningStats<T>,
        image: Var,
        z: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<Var> {
        let [n, cin, h, w] = tape.value(image).dims4("unet_forward")?;
        if cin != self.config.in_channels {
            return Err(TensorError::dim("unet_forward", format!("expected {} input channels, got {cin}", self.config.in_channels)).into());
        }
        let factor = 1 << self.config.depth;
        if h % factor != 0 || w % factor != 0 {
            return Err(TensorError::config("unet_forward", format!("{h}x{w} is not divisible by {factor}")).into());
        }
        let z = match (self.config.is_conditioned(), z) {
            (true, None) => return Err(Error::Usage("conditioned model requires a conditioning batch".into())),
            (true, Some(z)) => {
                if z.shape() != [n, self.config.conditioning_size] {
                    return Err(TensorError::dim(
                        "unet_forward",
                        format!("conditioning shape {:?}, expected [{n}, {}]", z.shape(), self.config.conditioning_size),
                    )
                    .into());
                }
                Some(tape.constant(z.clone()))
            }
            (false, _) => None,
        };
        let norm = NormOptions { momentum: T::of(self.norm.momentum), eps: T::of(self.norm.eps) };
        let sub_block = |tape: &mut Tape<T>, stats: &mut RunningStats<T>, b: &SubBlock, x: Var| -> Result<Var> {
            let y = tape.conv2d(x, params.get(&b.conv("kernel"))?, params.get(&b.conv("bias"))?, 1, 1)?;
            let y = tape.channel_norm(y, stats.get_mut(&b.norm())?, mode, norm)?;
            let (gamma, beta) = match z {
                Some(z) => self.generators[b.site].record(tape, params, z)?,
                None => (params.get(&b.affine("gamma"))?, params.get(&b.affine("beta"))?),
            };
            let y = tape.channel_affine(y, gamma, beta)?;
            Ok(tape.relu(y)?)
        };

        let mut blocks = self.blocks.iter();
        let mut level = |tape: &mut Tape<T>, stats: &mut RunningStats<T>, x: Var| -> Result<Var> {
            let first = blocks.next().expect("layout has a block per sub-block");
            let x = sub_block(tape, stats, first, x)?;
            let second = blocks.next().expect("layout has a block per sub-block");
            sub_block(tape, stats, second, x)
        };

        let mut x = image;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            x = level(tape, stats, x)?;
            skips.push(x);
            x = tape.maxpool2(x)?;
        }
        x = level(tape, stats, x)?;
        for lvl in (0..self.config.depth).rev() {
            let up = tape.upsample_nearest2(x)?;
            let up = tape.conv2d(
                up,
                params.get(&format!("dec.{lvl}.up.kernel"))?,
                params.get(&format!("dec.{lvl}.up.bias"))?,
                1,
                1,
            )?;
            let joined = tape.concat_channels(skips[lvl], up)?;
            x = level(tape, stats, joined)?;
        }
        let logits = tape.conv2d(x, params.get("head.kernel")?, params.get("head.bias")?, 1, 0)?;
        Ok(tape.sigmoid(logits)?)
    }

    /// Inference-mode probabilities for a batch of images.
    pub fn predict<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        stats: &RunningStats<T>,
        images: &Tensor<T>,
        z: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = params.bind_constants(&mut tape);
        let mut stats = stats.clone();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, &mut stats, x, z, Mode::Infer)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(depth: usize, conditioning_size: usize) -> ModelConfig {
        ModelConfig { depth, base_channels: 4, conditioning_size, film_hidden: 8, ..ModelConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(UNet::new(config(1, 0)).is_err());
        assert!(UNet::new(config(5, 0)).is_err());
        assert!(UNet::new(ModelConfig { base_channels: 2, ..config(2, 0) }).is_err());
        assert!(UNet::new(config(4, 2)).is_ok());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let net = UNet::new(config(3, 2)).unwrap();
        let a = net.init_params::<f32>(7);
        let b = net.init_params::<f32>(7);
        assert_eq!(a, b);
        assert_ne!(a, net.init_params::<f32>(8));
        for (name, t) in a.iter() {
            if name.ends_with("bias") && !name.ends_with("gamma.bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        net.check_params(&a).unwrap();
    }

    #[test]
    fn film_tensors_present_iff_conditioned() {
        let plain = UNet::new(config(2, 0)).unwrap();
        let film = UNet::new(config(2, 2)).unwrap();
        assert!(plain.param_names().iter().all(|n| !n.starts_with("film.")));
        assert!(plain.param_names().iter().any(|n| n.contains(".affine1.gamma")));
        assert!(film.param_names().iter().any(|n| n == "film.3.gen.h.weight"));
        assert!(film.param_names().iter().all(|n| !n.contains(".affine")));
        assert_eq!(film.sites(), 2 * 2 + 2 + 2 * 2);
    }

    #[test]
    fn check_params_reports_name_differences() {
        let plain = UNet::new(config(2, 0)).unwrap();
        let film = UNet::new(config(2, 2)).unwrap();
        match plain.check_params(&film.init_params::<f32>(0)) {
            Err(Error::NameSet { missing, extra }) => {
                assert!(missing.iter().all(|n| n.contains("affine")));
                assert!(extra.iter().all(|n| n.starts_with("film.")));
            }
            other => panic!("expected name-set error, got {other:?}"),
        }
    }

    #[test]
    fn forward_shape_and_range_for_every_depth() {
        for depth in 2..=4 {
            let net = UNet::new(config(depth, 0)).unwrap();
            let params = net.init_params::<f32>(1);
            let stats = net.init_stats();
            let img = Tensor::new(&[1, 1, 48, 48], (0..48 * 48).map(|i| ((i % 13) as f32) / 13.0).collect()).unwrap();
            let out = net.predict(&params, &stats, &img, None).unwrap();
            assert_eq!(out.shape(), &[1, 1, 48, 48]);
            assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn conditioned_forward_requires_z() {
        let net = UNet::new(config(2, 2)).unwrap();
        let params = net.init_params::<f32>(1);
        let stats = net.init_stats();
        let img = Tensor::zeros(&[2, 1, 8, 8]);
        assert!(matches!(net.predict(&params, &stats, &img, None), Err(Error::Usage(_))));
        let z_bad = Tensor::zeros(&[1, 2]);
        assert!(net.predict(&params, &stats, &img, Some(&z_bad)).is_err());
    }
}
