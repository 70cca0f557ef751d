use csi_ntc::channel::{generate_dataset, ChannelConfig, ChannelTensor, Normalization};
use csi_ntc::entropy_model::{model_cross_entropy, rate_nats, EntropyModelParams};
use csi_ntc::quantizer::{dequantize, quantize, LatentShape, LatentTensor, QuantLadder};
use csi_ntc::transform::{
    analyze, count_parameters, count_parameters_with_entropy, evaluate_quantized,
    loss_and_gradients, synthesize, train, Architecture, LossMode, SwinConfig, TrainConfig,
    TransformParams,
};
use csi_ntc::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(n_delay: usize, n_tx: usize, seed: u64) -> ChannelTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = (0..2 * n_delay * n_tx)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    ChannelTensor::new(n_delay, n_tx, planes, Normalization::IDENTITY).unwrap()
}

fn toy_swin() -> SwinConfig {
    SwinConfig {
        patch_size: 2,
        heads: 2,
        depths: vec![2, 2],
        embed_dim: 4,
        window: 2,
        mlp_ratio: 2,
        latent_channels: 3,
    }
}

fn architectures() -> Vec<Architecture> {
    vec![
        Architecture::Identity,
        Architecture::Linear { latent_dim: 12 },
        Architecture::Mlp {
            hidden: 10,
            latent_dim: 6,
        },
        Architecture::SwinToy(toy_swin()),
    ]
}

fn perturb_all(params: &mut TransformParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut params.tensors {
        for v in &mut t.data {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

/// Central-difference check of every parameter group; returns the worst relative error.
fn gradient_check(arch: Architecture) -> f64 {
    let (n_delay, n_tx) = (8, 8);
    let mut params = TransformParams::init(arch, n_delay, n_tx, 3).unwrap();
    perturb_all(&mut params, 4);
    let channels = params.latent_shape().channels;
    let entropy = EntropyModelParams::new(
        (0..channels).map(|c| 0.1 * c as f64 - 0.05).collect(),
        (0..channels).map(|c| -0.5 + 0.2 * c as f64).collect(),
    )
    .unwrap();
    let batch_owned = [
        random_tensor(n_delay, n_tx, 10),
        random_tensor(n_delay, n_tx, 11),
    ];
    let batch: Vec<&ChannelTensor> = batch_owned.iter().collect();
    let cfg = TrainConfig::new(0.05, 0.5);
    let eval = |p: &TransformParams, e: &EntropyModelParams, b: &[&ChannelTensor]| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        loss_and_gradients(b, p, e, &cfg, LossMode::Noisy, &mut rng).unwrap()
    };
    let (base, grads) = eval(&params, &entropy, &batch);
    let eps = 1e-5;
    // partials far below the loss scale are compared against the round-off floor
    let floor = 1e-6 * base.loss.abs().max(1.0);
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
    let mut worst: f64 = 0.0;
    let mut probe = ChaCha8Rng::seed_from_u64(5);

    for ti in 0..params.tensors.len() {
        let len = params.tensors[ti].data.len();
        let picks: Vec<usize> = if len <= 6 {
            (0..len).collect()
        } else {
            (0..6).map(|_| probe.random_range(0..len)).collect()
        };
        for i in picks {
            let mut plus = params.clone();
            plus.tensors[ti].data[i] += eps;
            let mut minus = params.clone();
            minus.tensors[ti].data[i] -= eps;
            let fd = (eval(&plus, &entropy, &batch).0.loss - eval(&minus, &entropy, &batch).0.loss)
                / (2.0 * eps);
            let r = rel(fd, grads.transform[ti][i]);
            assert!(
                r <= 1e-4,
                "{} [{i}]: fd {fd} vs {}",
                params.tensors[ti].name,
                grads.transform[ti][i]
            );
            worst = worst.max(r);
        }
    }
    for c in 0..channels {
        for (group, analytic) in [(0, grads.loc[c]), (1, grads.log_scale[c])] {
            let shifted = |delta: f64| {
                let mut e = entropy.clone();
                if group == 0 {
                    e.loc[c] += delta;
                } else {
                    e.log_scale[c] += delta;
                }
                eval(&params, &e, &batch).0.loss
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let r = rel(fd, analytic);
            assert!(
                r <= 1e-4,
                "entropy group {group} channel {c}: fd {fd} vs {analytic}"
            );
            worst = worst.max(r);
        }
    }
    for _ in 0..6 {
        let s = probe.random_range(0..2);
        let i = probe.random_range(0..2 * n_delay * n_tx);
        let shifted = |delta: f64| {
            let mut owned = batch_owned.clone();
            owned[s].planes[i] += delta;
            let refs: Vec<&ChannelTensor> = owned.iter().collect();
            eval(&params, &entropy, &refs).0.loss
        };
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        let an = grads.input[s * 2 * n_delay * n_tx + i];
        let r = rel(fd, an);
        assert!(r <= 1e-4, "input [{s}, {i}]: fd {fd} vs {an}");
        worst = worst.max(r);
    }
    worst
}

#[test]
fn gradients_match_finite_differences_for_every_architecture() {
    for arch in architectures() {
        let name = arch.name();
        let worst = gradient_check(arch);
        assert!(worst <= 1e-4, "{name}: worst relative error {worst}");
    }
}

#[test]
fn identity_pair_is_exact() {
    let h = random_tensor(4, 6, 1);
    let params = TransformParams::identity(4, 6);
    let y = analyze(&h, &params).unwrap();
    assert_eq!(y.shape, LatentShape::new(2, 4, 6));
    assert_eq!(synthesize(&y, &params, h.scale).unwrap(), h);
}

#[test]
fn orthonormal_linear_preserves_norm() {
    let h = random_tensor(4, 4, 2);
    let mut params = TransformParams::linear_identity(4, 4);
    // rotate pairs of coordinates by a fixed angle to get a non-trivial orthonormal map
    let d = 32;
    let (s, c) = 0.3f64.sin_cos();
    let w = &mut params.tensor_mut("enc.weight").unwrap().data;
    for i in (0..d).step_by(2) {
        w[i * d + i] = c;
        w[i * d + i + 1] = s;
        w[(i + 1) * d + i] = -s;
        w[(i + 1) * d + i + 1] = c;
    }
    let y = analyze(&h, &params).unwrap();
    let hn = h.planes.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((y.frobenius_norm() - hn).abs() <= 1e-6);
}

#[test]
fn swin_shapes_follow_patching() {
    let one_stage = SwinConfig {
        depths: vec![2],
        latent_channels: 8,
        ..SwinConfig::desk()
    };
    let params = TransformParams::init(Architecture::SwinToy(one_stage), 32, 32, 0).unwrap();
    assert_eq!(params.latent_shape(), LatentShape::new(8, 8, 8));
    let h = random_tensor(32, 32, 3);
    let y = analyze(&h, &params).unwrap();
    assert_eq!(y.data.len(), 8 * 8 * 8);

    let desk = TransformParams::init(Architecture::SwinToy(SwinConfig::desk()), 32, 32, 0).unwrap();
    assert_eq!(desk.latent_shape(), LatentShape::new(16, 4, 4));
}

#[test]
fn synthesis_shape_and_bias_only_output() {
    for arch in architectures() {
        let params = TransformParams::init(arch, 8, 8, 9).unwrap();
        let zero = LatentTensor::zeros(params.latent_shape());
        let a = synthesize(&zero, &params, Normalization::IDENTITY).unwrap();
        let b = synthesize(&zero, &params, Normalization::IDENTITY).unwrap();
        assert_eq!((a.n_delay, a.n_tx, a.planes.len()), (8, 8, 128));
        assert_eq!(a, b);
        let y = analyze(&random_tensor(8, 8, 4), &params).unwrap();
        let out = synthesize(&y, &params, Normalization::IDENTITY).unwrap();
        assert_eq!(out.planes.len(), 128);
    }
}

#[test]
fn dimension_errors() {
    let params = TransformParams::init(Architecture::Linear { latent_dim: 4 }, 8, 8, 0).unwrap();
    assert!(matches!(
        analyze(&random_tensor(4, 8, 0), &params),
        Err(Error::Dimension(_))
    ));
    let wrong = LatentTensor::zeros(LatentShape::new(5, 1, 1));
    assert!(matches!(
        synthesize(&wrong, &params, Normalization::IDENTITY),
        Err(Error::Dimension(_))
    ));
    let bad = SwinConfig {
        patch_size: 3,
        ..SwinConfig::desk()
    };
    assert!(matches!(
        TransformParams::init(Architecture::SwinToy(bad), 32, 32, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn loss_definition_limits() {
    let batch_owned = [random_tensor(4, 4, 5), random_tensor(4, 4, 6)];
    let batch: Vec<&ChannelTensor> = batch_owned.iter().collect();
    let params = TransformParams::identity(4, 4);
    let entropy = EntropyModelParams::standard(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = TrainConfig::new(1e-12, 0.1);
    let (clean, _) =
        loss_and_gradients(&batch, &params, &entropy, &cfg, LossMode::Clean, &mut rng).unwrap();
    assert_eq!(clean.distortion, 0.0);

    let lin = TransformParams::init(Architecture::Linear { latent_dim: 8 }, 4, 4, 1).unwrap();
    let ent = EntropyModelParams::standard(8);
    let (small, g) =
        loss_and_gradients(&batch, &lin, &ent, &cfg, LossMode::Noisy, &mut rng).unwrap();
    assert!((small.loss - small.distortion).abs() <= 1e-9 * small.loss.max(1.0));
    assert!(g.loc.iter().chain(&g.log_scale).all(|v| v.abs() < 1e-9));
}

#[test]
fn noise_proxy_is_uniform() {
    let batch_owned: Vec<ChannelTensor> = (0..8).map(|i| random_tensor(8, 8, 20 + i)).collect();
    let batch: Vec<&ChannelTensor> = batch_owned.iter().collect();
    let params = TransformParams::init(Architecture::Linear { latent_dim: 64 }, 8, 8, 1).unwrap();
    let entropy = EntropyModelParams::standard(64);
    let width = 0.25;
    let mut samples = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..4 {
        let (_, g) = loss_and_gradients(
            &batch,
            &params,
            &entropy,
            &TrainConfig::new(1e-3, width),
            LossMode::Noisy,
            &mut rng,
        )
        .unwrap();
        samples.extend(g.noise);
    }
    assert!(samples
        .iter()
        .all(|u| (-width / 2.0..width / 2.0).contains(u)));
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let ks = samples
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let cdf = u / width + 0.5;
            (cdf - i as f64 / n)
                .abs()
                .max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    // 1% critical value of the one-sample Kolmogorov-Smirnov statistic
    assert!(ks < 1.63 / n.sqrt(), "KS statistic {ks} over {n} samples");
}

#[test]
fn evaluation_rate_matches_cross_entropy() {
    let params = TransformParams::init(
        Architecture::Mlp {
            hidden: 16,
            latent_dim: 6,
        },
        8,
        8,
        2,
    )
    .unwrap();
    let entropy = EntropyModelParams::new(
        vec![0.1, -0.2, 0.0, 0.3, 0.05, 0.0],
        vec![-1.0, -0.5, 0.0, 0.2, -2.0, 0.5],
    )
    .unwrap();
    let ladder = QuantLadder::new(0.1, 4).unwrap();
    for seed in 0..5 {
        let y = analyze(&random_tensor(8, 8, seed), &params).unwrap();
        for level in 0..4 {
            let s = quantize(&y, &ladder, level).unwrap();
            let nats = rate_nats(&entropy, &dequantize(&s), ladder.step(level)).unwrap();
            let bits = model_cross_entropy(&entropy, &s).unwrap();
            assert!((nats / std::f64::consts::LN_2 - bits).abs() <= 1e-9 * bits.max(1.0));
        }
    }
}

fn toy_dataset(count: usize) -> Vec<ChannelTensor> {
    let cfg = ChannelConfig {
        n_tx: 4,
        n_subcarriers: 64,
        n_delay: 4,
        n_paths: 3,
        decay: 0.5,
        seed: 17,
    };
    generate_dataset(&cfg, count).unwrap()
}

#[test]
fn training_descends_from_identity_initialization() {
    let data = toy_dataset(200);
    let params = TransformParams::linear_identity(4, 4);
    let mut cfg = TrainConfig::new(1e-2, 0.05);
    cfg.epochs = 50;
    cfg.batch_size = 20;
    cfg.learning_rate = 5e-3;
    let out = train(&data, &cfg, params, EntropyModelParams::standard(32)).unwrap();
    assert_eq!(out.history.len(), 50);
    assert!(out.history.last().unwrap().loss < out.history[0].loss);
}

#[test]
fn training_is_deterministic() {
    let data = toy_dataset(40);
    let params = TransformParams::init(
        Architecture::Mlp {
            hidden: 8,
            latent_dim: 4,
        },
        4,
        4,
        0,
    )
    .unwrap();
    let mut cfg = TrainConfig::new(1e-2, 0.05);
    cfg.epochs = 5;
    let a = train(&data, &cfg, params.clone(), EntropyModelParams::standard(4)).unwrap();
    let b = train(&data, &cfg, params, EntropyModelParams::standard(4)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.transform, b.transform);
}

#[test]
fn divergence_returns_the_last_checkpoint() {
    let data = toy_dataset(20);
    let params = TransformParams::init(Architecture::Linear { latent_dim: 4 }, 4, 4, 0).unwrap();
    let mut cfg = TrainConfig::new(1e-2, 0.05);
    cfg.learning_rate = 1e6;
    cfg.clip_norm = None;
    cfg.epochs = 50;
    match train(&data, &cfg, params, EntropyModelParams::standard(4)) {
        Err(Error::Divergence { checkpoint, .. }) => {
            let cp = checkpoint.expect("checkpoint");
            assert_eq!(cp.history.len(), cp.epoch);
            assert!(cp.history.iter().all(|s| s.loss.is_finite()));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn larger_lambda_gives_lower_rate() {
    let data = toy_dataset(200);
    let ladder = QuantLadder::new(0.05, 1).unwrap();
    let mut last_bits = f64::INFINITY;
    for lambda in [1e-4, 1e-3, 1e-2] {
        let params =
            TransformParams::init(Architecture::Linear { latent_dim: 16 }, 4, 4, 0).unwrap();
        let mut cfg = TrainConfig::new(lambda, ladder.base_step());
        cfg.epochs = 30;
        cfg.learning_rate = 1e-2;
        let out = train(&data, &cfg, params, EntropyModelParams::standard(16)).unwrap();
        let eval = evaluate_quantized(&data, &out.transform, &out.entropy, &ladder, 0).unwrap();
        assert!(
            eval.bits <= last_bits + 1e-6,
            "lambda {lambda}: {} bits after {last_bits}",
            eval.bits
        );
        last_bits = eval.bits;
    }
}

#[test]
fn parameter_counts() {
    let lin = TransformParams::init(Architecture::Linear { latent_dim: 64 }, 32, 32, 0).unwrap();
    assert_eq!(count_parameters(&lin), 2 * (2048 * 64 + 64));
    assert_eq!(
        count_parameters_with_entropy(&lin, &EntropyModelParams::standard(64)),
        2 * (2048 * 64 + 64) + 128
    );
    assert_eq!(count_parameters(&TransformParams::identity(32, 32)), 0);

    let mlp = TransformParams::init(
        Architecture::Mlp {
            hidden: 5,
            latent_dim: 3,
        },
        2,
        2,
        0,
    )
    .unwrap();
    assert_eq!(
        count_parameters(&mlp),
        (8 * 5 + 5) + (5 * 3 + 3) + (3 * 5 + 5) + (5 * 8 + 8)
    );

    let small =
        TransformParams::init(Architecture::SwinToy(SwinConfig::desk()), 32, 32, 0).unwrap();
    let wide = TransformParams::init(
        Architecture::SwinToy(SwinConfig {
            embed_dim: 32,
            ..SwinConfig::desk()
        }),
        32,
        32,
        0,
    )
    .unwrap();
    let ratio = count_parameters(&wide) as f64 / count_parameters(&small) as f64;
    assert!((10.0..=16.0).contains(&ratio), "ratio {ratio}");
}
