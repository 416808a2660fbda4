use filmseg::film::{film_modulate, FilmParams};
use filmseg::gradcheck::check_op;
use filmseg::params::{ModelParams, RunningStats};
use filmseg::unet::{ModelConfig, UNet};
use filmseg::{Mode, NormStats, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn config(depth: usize, conditioning_size: usize) -> ModelConfig {
    ModelConfig { depth, base_channels: 4, conditioning_size, film_hidden: 6, ..ModelConfig::default() }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn one_hot(rows: &[usize], width: usize) -> Tensor<f64> {
    let mut data = vec![0.0; rows.len() * width];
    for (i, &r) in rows.iter().enumerate() {
        data[i * width + r] = 1.0;
    }
    Tensor::new(&[rows.len(), width], data).unwrap()
}

/// Baseline and FiLMed networks with identical random backbones; the FiLMed
/// generators have random hidden layers but output heads pinned to gamma=1, beta=0.
fn paired_params(seed: u64) -> (UNet, ModelParams<f64>, UNet, ModelParams<f64>, RunningStats<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = UNet::new(config(2, 0)).unwrap();
    let film = UNet::new(config(2, 2)).unwrap();
    let mut bp = base.init_params::<f64>(seed);
    for (name, t) in bp.iter_mut() {
        if name.contains(".affine") {
            continue;
        }
        *t = normal(t.shape(), &mut rng);
    }
    let mut fp = film.init_params::<f64>(seed);
    for (name, t) in fp.iter_mut() {
        if let Some(shared) = bp.get(name) {
            *t = shared.clone();
        } else if name.ends_with("h.weight") || name.ends_with("h.bias") {
            *t = normal(t.shape(), &mut rng);
        } else if name.ends_with("gamma.bias") {
            *t = Tensor::full(t.shape(), 1.0);
        } else {
            *t = Tensor::zeros(t.shape());
        }
    }
    let mut stats = base.init_stats::<f64>();
    for (name, c) in base.norm_sites() {
        let mean: Vec<f64> = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let var: Vec<f64> = (0..c).map(|_| 0.5 + rng.random::<f64>()).collect();
        stats.insert(name, NormStats { mean, var });
    }
    (base, bp, film, fp, stats)
}

fn forward(net: &UNet, params: &ModelParams<f64>, stats: &RunningStats<f64>, x: &Tensor<f64>, z: Option<&Tensor<f64>>, mode: Mode) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = params.bind_constants(&mut tape);
    let mut stats = stats.clone();
    let xv = tape.constant(x.clone());
    let out = net.forward(&mut tape, &bound, &mut stats, xv, z, mode).unwrap();
    tape.value(out).clone()
}

#[test]
fn film_identity_matches_baseline_on_twenty_inputs() {
    let (base, bp, film, fp, stats) = paired_params(7);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let x = normal(&[2, 1, 16, 16], &mut rng);
        let z = one_hot(&[i % 2, (i / 2) % 2], 2);
        for mode in [Mode::Train, Mode::Infer] {
            let a = forward(&base, &bp, &stats, &x, None, mode);
            let b = forward(&film, &fp, &stats, &x, Some(&z), mode);
            for (p, q) in a.data().iter().zip(b.data()) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn fresh_film_model_equals_fresh_baseline() {
    let base = UNet::new(config(3, 0)).unwrap();
    let film = UNet::new(config(3, 2)).unwrap();
    let bp = base.init_params::<f64>(11);
    let fp = film.init_params::<f64>(11);
    let x = normal(&[1, 1, 48, 48], &mut ChaCha8Rng::seed_from_u64(3));
    let a = base.predict(&bp, &base.init_stats(), &x, None).unwrap();
    let b = film.predict(&fp, &film.init_stats(), &x, Some(&one_hot(&[1], 2))).unwrap();
    let worst = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn film_identity_for_any_weights(seed in any::<u64>(), z0 in 0usize..2) {
        let (base, bp, film, fp, stats) = paired_params(seed);
        let x = normal(&[1, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let a = forward(&base, &bp, &stats, &x, None, Mode::Infer);
        let b = forward(&film, &fp, &stats, &x, Some(&one_hot(&[z0], 2)), Mode::Infer);
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_permutation_permutes_inference_outputs(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let net = UNet::new(config(2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = net.init_params::<f64>(seed);
        for (_, t) in params.iter_mut() {
            *t = normal(t.shape(), &mut rng);
        }
        let x = normal(&[4, 1, 8, 8], &mut rng);
        let rows = [0usize, 1, 1, 0];
        let y = net.predict(&params, &net.init_stats(), &x, Some(&one_hot(&rows, 2))).unwrap();
        let px: Vec<f64> = perm.iter().flat_map(|&i| x.outer(i).to_vec()).collect();
        let prow: Vec<usize> = perm.iter().map(|&i| rows[i]).collect();
        let py = net
            .predict(&params, &net.init_stats(), &Tensor::new(&[4, 1, 8, 8], px).unwrap(), Some(&one_hot(&prow, 2)))
            .unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(py.outer(k), y.outer(i));
        }
    }

    #[test]
    fn modulation_is_affine_in_x(
        x1 in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 2 * 2),
        x2 in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 2 * 2),
        gamma in prop::collection::vec(-2.0f64..2.0, 3),
        beta in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let p = FilmParams { gamma: gamma.clone(), beta };
        let t1 = Tensor::new(&[2, 3, 2, 2], x1.clone()).unwrap();
        let t2 = Tensor::new(&[2, 3, 2, 2], x2.clone()).unwrap();
        let y1 = film_modulate(&t1, &p).unwrap();
        let y2 = film_modulate(&t2, &p).unwrap();
        for i in 0..x1.len() {
            let c = (i / 4) % 3;
            prop_assert!((y1.data()[i] - y2.data()[i] - gamma[c] * (x1[i] - x2[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn modulation_gradients_are_feature_sums(
        x in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 2 * 2),
        g in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 2 * 2),
    ) {
        let xt = Tensor::new(&[2, 3, 2, 2], x.clone()).unwrap();
        let gt = Tensor::new(&[2, 3, 2, 2], g.clone()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(xt.clone());
        let gamma = tape.param(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let beta = tape.param(Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        let y = tape.channel_affine(xv, gamma, beta).unwrap();
        let w = tape.constant(gt);
        let yw = tape.mul(y, w).unwrap();
        let loss = tape.sum(yw).unwrap();
        let grads = tape.backward(loss).unwrap();
        for c in 0..3 {
            let idx = (0..x.len()).filter(|i| (i / 4) % 3 == c);
            let dg: f64 = idx.clone().map(|i| x[i] * g[i]).sum();
            let db: f64 = idx.map(|i| g[i]).sum();
            prop_assert!((grads.get(gamma).unwrap()[c] - dg).abs() <= 1e-12);
            prop_assert!((grads.get(beta).unwrap()[c] - db).abs() <= 1e-12);
        }
        let fd = check_op("film_affine", &[xt, Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap(), Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()], |t, v| {
            Ok(t.channel_affine(v[0], v[1], v[2])?)
        }).unwrap();
        prop_assert!(fd.passed, "{:?}", fd);
    }
}

#[test]
fn output_shape_matches_input_for_every_depth() {
    for depth in 2..=4 {
        for cond in [0, 2] {
            let net = UNet::new(config(depth, cond)).unwrap();
            let params = net.init_params::<f32>(depth as u64);
            let x = Tensor::<f32>::full(&[1, 1, 48, 48], 0.3);
            let z = (cond > 0).then(|| one_hot(&[0], 2).cast::<f32>());
            let y = net.predict(&params, &net.init_stats(), &x, z.as_ref()).unwrap();
            assert_eq!(y.shape(), &[1, 1, 48, 48]);
            assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

#[test]
fn identical_inputs_give_bitwise_identical_outputs() {
    let net = UNet::new(config(3, 2)).unwrap();
    let params = net.init_params::<f32>(5);
    let x = normal(&[2, 1, 48, 48], &mut ChaCha8Rng::seed_from_u64(1)).cast::<f32>();
    let z = one_hot(&[0, 1], 2).cast::<f32>();
    let a = net.predict(&params, &net.init_stats(), &x, Some(&z)).unwrap();
    let b = net.predict(&params, &net.init_stats(), &x, Some(&z)).unwrap();
    assert_eq!(a, b);
}
