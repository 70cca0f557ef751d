//! Rate-distortion training with the additive-uniform-noise proxy.
//!
//! Per sample the loss is `‖X − X̂‖²_F + λ · rate_nats(ỹ)` with
//! `ỹ = y + u`, `u ~ U(−Δ₀/2, Δ₀/2)`; batches report the mean.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, TransformParams};
use crate::channel::{nmse, ChannelTensor};
use crate::entropy_model::{model_cross_entropy, rate_nats_with_gradients, EntropyModelParams};
use crate::error::{Error, Result};
use crate::quantizer::{dequantize, quantize, LatentTensor, QuantLadder};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    /// Step size for the entropy model. Under SGD its gradient is divided by
    /// `lambda` so the model tracks the latent distribution at every tradeoff.
    pub entropy_learning_rate: f64,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Width of the training noise, equal to the level-0 step.
    pub noise_width: f64,
    /// Rescale transform gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(lambda: f64, noise_width: f64) -> Self {
        Self {
            lambda,
            learning_rate: 1e-3,
            entropy_learning_rate: 1e-2,
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            epochs: 20,
            batch_size: 16,
            seed: 0,
            noise_width,
            clip_norm: Some(10.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("lambda", self.lambda)?;
        positive("learning rate", self.learning_rate)?;
        positive("entropy learning rate", self.entropy_learning_rate)?;
        positive("noise width", self.noise_width)?;
        if let Some(c) = self.clip_norm {
            positive("clip norm", c)?;
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::Config(format!(
                    "momentum {momentum} must lie in [0, 1)"
                )));
            }
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) => {
                return Err(Error::Config(
                    "adam needs betas in [0, 1) and epsilon > 0".into(),
                ));
            }
            _ => {}
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };
}

/// Moment buffers of one parameter group.
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    /// One update of `weights` along `grads · factor`; `step` counts from 1.
    fn apply(
        &mut self,
        opt: Optimizer,
        step: i32,
        lr: f64,
        weights: &mut [f64],
        grads: &[f64],
        factor: f64,
    ) {
        match opt {
            Optimizer::Sgd { momentum } => {
                for ((w, m), g) in weights.iter_mut().zip(&mut self.first).zip(grads) {
                    *m = momentum * *m + g * factor;
                    *w -= lr * *m;
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let c1 = 1.0 - beta1.powi(step);
                let c2 = 1.0 - beta2.powi(step);
                for (((w, m), v), g) in weights
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .zip(grads)
                {
                    let g = g * factor;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                }
            }
        }
    }
}

/// How the latent reaches the decoder and the rate term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// `ỹ = y + u` with noise drawn from the caller's generator.
    Noisy,
    /// `ỹ = y`.
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    /// Mean squared Frobenius error per sample.
    pub distortion: f64,
    /// Mean rate per sample in nats.
    pub rate_nats: f64,
}

/// Partials of the batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    /// One buffer per transform tensor, in parameter order.
    pub transform: Vec<Vec<f64>>,
    pub loc: Vec<f64>,
    pub log_scale: Vec<f64>,
    /// With respect to the concatenated input planes.
    pub input: Vec<f64>,
    /// The noise that was added to the latents.
    pub noise: Vec<f64>,
}

fn check_batch(
    batch: &[&ChannelTensor],
    params: &TransformParams,
    entropy: &EntropyModelParams,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    for h in batch {
        if h.n_delay != params.n_delay || h.n_tx != params.n_tx {
            return Err(Error::Dimension(format!(
                "sample 2x{}x{} does not match transform input 2x{}x{}",
                h.n_delay, h.n_tx, params.n_delay, params.n_tx
            )));
        }
        if h.planes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input sample".into()));
        }
    }
    let channels = params.latent_shape().channels;
    if entropy.channels() != channels {
        return Err(Error::Dimension(format!(
            "entropy model has {} channels, latent has {channels}",
            entropy.channels()
        )));
    }
    Ok(())
}

/// Batch loss and exact gradients for every parameter group.
pub fn loss_and_gradients(
    batch: &[&ChannelTensor],
    params: &TransformParams,
    entropy: &EntropyModelParams,
    cfg: &TrainConfig,
    mode: LossMode,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, ParamGradients)> {
    check_batch(batch, params, entropy)?;
    let count = batch.len();
    let shape = params.latent_shape();
    let latent_len = shape.len();

    let mut g = Graph::new(params);
    let x = g.tape.leaf(
        batch
            .iter()
            .flat_map(|h| h.planes.iter().copied())
            .collect(),
    );
    let y = g.encode(params, x, count);
    let half = 0.5 * cfg.noise_width;
    let noise: Vec<f64> = match mode {
        LossMode::Noisy => (0..count * latent_len)
            .map(|_| rng.random_range(-half..half))
            .collect(),
        LossMode::Clean => vec![0.0; count * latent_len],
    };
    let y_noisy = g.tape.shift(y, &noise);

    let weight = cfg.lambda / count as f64;
    let mut rate_total = 0.0;
    let mut d_latent = Vec::with_capacity(count * latent_len);
    let mut d_loc = vec![0.0; entropy.channels()];
    let mut d_log_scale = vec![0.0; entropy.channels()];
    for sample in g.tape.value(y_noisy).chunks_exact(latent_len) {
        let latent = LatentTensor::new(shape, sample.to_vec())?;
        let r = rate_nats_with_gradients(entropy, &latent, cfg.noise_width)?;
        rate_total += r.nats;
        d_latent.extend(r.d_latent.iter().map(|d| d * weight));
        for c in 0..entropy.channels() {
            d_loc[c] += r.d_loc[c] * weight;
            d_log_scale[c] += r.d_log_scale[c] * weight;
        }
    }
    let rate = g
        .tape
        .external(weight * rate_total, vec![(y_noisy, d_latent)]);
    let x_hat = g.decode(params, y_noisy, count);
    let sse = g.tape.squared_error(x_hat, x);
    let distortion = g.tape.scale(sse, 1.0 / count as f64);
    let loss = g.tape.add(distortion, rate);

    let breakdown = LossBreakdown {
        loss: g.tape.value(loss)[0],
        distortion: g.tape.value(distortion)[0],
        rate_nats: rate_total / count as f64,
    };
    if !breakdown.loss.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            step: 0,
            detail: format!(
                "loss {} (distortion {}, rate {} nats)",
                breakdown.loss, breakdown.distortion, breakdown.rate_nats
            ),
            checkpoint: None,
        });
    }

    let mut grads = g.tape.backward(loss);
    let transform = g
        .params
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.data.len()]))
        .collect();
    let input = grads
        .take(x)
        .unwrap_or_else(|| vec![0.0; count * params.input_len()]);
    Ok((
        breakdown,
        ParamGradients {
            transform,
            loc: d_loc,
            log_scale: d_log_scale,
            input,
            noise,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub distortion: f64,
    pub rate_nats: f64,
}

/// Parameters saved after an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub transform: TransformParams,
    pub entropy: EntropyModelParams,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub transform: TransformParams,
    pub entropy: EntropyModelParams,
    /// Sample-weighted means per epoch, measured while training.
    pub history: Vec<EpochStats>,
}

fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Gradient descent over shuffled mini-batches.
///
/// Final weights are rounded to `f32` so a model trained in memory behaves
/// exactly like the same model read back from a weight file.
pub fn train(
    dataset: &[ChannelTensor],
    cfg: &TrainConfig,
    initial: TransformParams,
    initial_entropy: EntropyModelParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut params = initial;
    let mut entropy = initial_entropy;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut moments: Vec<Moments> = params
        .tensors
        .iter()
        .map(|t| Moments::new(t.data.len()))
        .collect();
    let mut loc_moments = Moments::new(entropy.channels());
    let mut log_scale_moments = Moments::new(entropy.channels());
    let mut updates = 0i32;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoint = Checkpoint {
        transform: params.clone(),
        entropy: entropy.clone(),
        epoch: 0,
        history: vec![],
    };
    let entropy_lr = match cfg.optimizer {
        Optimizer::Sgd { .. } => cfg.entropy_learning_rate / cfg.lambda,
        Optimizer::Adam { .. } => cfg.entropy_learning_rate,
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ChannelTensor> = chunk.iter().map(|&i| &dataset[i]).collect();
            let diverged = |detail: String| Error::Divergence {
                epoch,
                step,
                detail,
                checkpoint: Some(Box::new(checkpoint.clone())),
            };
            let (stats, grads) =
                match loss_and_gradients(&batch, &params, &entropy, cfg, LossMode::Noisy, &mut rng)
                {
                    Ok(r) => r,
                    Err(Error::Divergence { detail, .. }) => return Err(diverged(detail)),
                    Err(e) => return Err(e),
                };
            let n = chunk.len() as f64;
            sums[0] += stats.loss * n;
            sums[1] += stats.distortion * n;
            sums[2] += stats.rate_nats * n;

            let norm = global_norm(&grads.transform);
            if !norm.is_finite() {
                return Err(diverged(format!("gradient norm {norm}")));
            }
            let factor = match cfg.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            updates = updates.saturating_add(1);
            for ((t, m), g) in params
                .tensors
                .iter_mut()
                .zip(&mut moments)
                .zip(&grads.transform)
            {
                m.apply(
                    cfg.optimizer,
                    updates,
                    cfg.learning_rate,
                    &mut t.data,
                    g,
                    factor,
                );
            }
            loc_moments.apply(
                cfg.optimizer,
                updates,
                entropy_lr,
                &mut entropy.loc,
                &grads.loc,
                1.0,
            );
            log_scale_moments.apply(
                cfg.optimizer,
                updates,
                entropy_lr,
                &mut entropy.log_scale,
                &grads.log_scale,
                1.0,
            );
        }
        let total = dataset.len() as f64;
        history.push(EpochStats {
            loss: sums[0] / total,
            distortion: sums[1] / total,
            rate_nats: sums[2] / total,
        });
        checkpoint = Checkpoint {
            transform: params.clone(),
            entropy: entropy.clone(),
            epoch: epoch + 1,
            history: history.clone(),
        };
    }

    params.round_to_f32();
    for v in entropy.loc.iter_mut().chain(entropy.log_scale.iter_mut()) {
        *v = *v as f32 as f64;
    }
    Ok(TrainOutcome {
        transform: params,
        entropy,
        history,
    })
}

/// Deployment-path evaluation at one ladder level: mean bits per sample under
/// the model and mean NMSE after dequantize-then-synthesize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizedEval {
    pub bits: f64,
    pub nmse: f64,
    pub distortion: f64,
}

pub fn evaluate_quantized(
    dataset: &[ChannelTensor],
    params: &TransformParams,
    entropy: &EntropyModelParams,
    ladder: &QuantLadder,
    level: usize,
) -> Result<QuantizedEval> {
    ladder.check_level(level)?;
    if dataset.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let refs: Vec<&ChannelTensor> = dataset.iter().collect();
    let mut bits = 0.0;
    let mut nmse_sum = 0.0;
    let mut distortion = 0.0;
    for chunk in refs.chunks(64) {
        let latents = super::analyze_batch(chunk, params)?;
        let mut restored = Vec::with_capacity(latents.len());
        for y in &latents {
            let s = quantize(y, ladder, level)?;
            bits += model_cross_entropy(entropy, &s)?;
            restored.push(dequantize(&s));
        }
        let restored_refs: Vec<&LatentTensor> = restored.iter().collect();
        let mut outs = super::synthesize_batch(&restored_refs, params, chunk[0].scale)?;
        for (out, h) in outs.iter_mut().zip(chunk) {
            out.scale = h.scale;
        }
        for (h, h_hat) in chunk.iter().zip(&outs) {
            nmse_sum += nmse(h, h_hat)?;
            distortion += h
                .planes
                .iter()
                .zip(&h_hat.planes)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    let n = dataset.len() as f64;
    Ok(QuantizedEval {
        bits: bits / n,
        nmse: nmse_sum / n,
        distortion: distortion / n,
    })
}
