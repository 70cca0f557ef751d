//! Synthetic MIMO-OFDM channels and delay-domain preprocessing.
//!
//! A frequency-domain channel is an `n_subcarriers × n_tx` complex matrix.
//! Preprocessing moves each antenna column to the delay domain with a unitary
//! inverse DFT, keeps the first `n_delay` taps, splits real and imaginary parts
//! into two planes and applies an affine normalization
//! `normalized = (raw - offset) / gain`.
//!
//! All transforms use the unitary DFT convention (`1/sqrt(N)` in both
//! directions), so Frobenius norms carry over between domains unchanged.

mod file;

pub use file::TensorFile;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Parameters of the synthetic channel generator and of preprocessing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub n_tx: usize,
    pub n_subcarriers: usize,
    pub n_delay: usize,
    pub seed: u64,
    pub n_paths: usize,
    pub decay: f64,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_subcarriers == 0 || self.n_delay == 0 {
            return Err(Error::Config("channel dimensions must be positive".into()));
        }
        if !self.n_subcarriers.is_power_of_two() {
            return Err(Error::Config(format!(
                "n_subcarriers = {} is not a power of two",
                self.n_subcarriers
            )));
        }
        if self.n_delay > self.n_subcarriers {
            return Err(Error::Config(format!(
                "n_delay = {} exceeds n_subcarriers = {}",
                self.n_delay, self.n_subcarriers
            )));
        }
        if self.n_paths == 0 || self.n_paths > self.n_delay {
            return Err(Error::Config(format!(
                "n_paths = {} must lie in 1..={}",
                self.n_paths, self.n_delay
            )));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return Err(Error::Config(format!(
                "decay = {} must be >= 0",
                self.decay
            )));
        }
        if self.n_delay > u16::MAX as usize || self.n_tx > u16::MAX as usize {
            return Err(Error::Config("n_delay and n_tx must fit in 16 bits".into()));
        }
        Ok(())
    }

    /// Same configuration with the seed replaced by the per-sample seed of `index`.
    pub fn for_sample(&self, index: u64) -> ChannelConfig {
        ChannelConfig {
            seed: sample_seed(self.seed, index),
            ..*self
        }
    }
}

/// Independent per-sample seed derived from a dataset seed (splitmix64 finalizer).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Complex `n_subcarriers × n_tx` channel, row-major (subcarrier, antenna).
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyChannel {
    pub n_subcarriers: usize,
    pub n_tx: usize,
    pub data: Vec<Complex64>,
}

impl FrequencyChannel {
    pub fn zeros(n_subcarriers: usize, n_tx: usize) -> Self {
        Self {
            n_subcarriers,
            n_tx,
            data: vec![Complex64::new(0.0, 0.0); n_subcarriers * n_tx],
        }
    }

    #[inline]
    pub fn get(&self, subcarrier: usize, tx: usize) -> Complex64 {
        self.data[subcarrier * self.n_tx + tx]
    }

    #[inline]
    pub fn set(&mut self, subcarrier: usize, tx: usize, value: Complex64) {
        self.data[subcarrier * self.n_tx + tx] = value;
    }

    pub fn frobenius_norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Builds a frequency channel from delay-domain columns (`n_subcarriers` taps each).
    pub fn from_delay_domain(delay: &FrequencyChannel) -> Self {
        let mut out = delay.clone();
        transform_columns(&mut out, Direction::DelayToFrequency);
        out
    }

    /// Full-length delay-domain representation (unitary inverse DFT per column).
    pub fn to_delay_domain(&self) -> Self {
        let mut out = self.clone();
        transform_columns(&mut out, Direction::FrequencyToDelay);
        out
    }
}

#[derive(Clone, Copy)]
enum Direction {
    DelayToFrequency,
    FrequencyToDelay,
}

fn transform_columns(h: &mut FrequencyChannel, direction: Direction) {
    let n = h.n_subcarriers;
    let mut planner = FftPlanner::<f64>::new();
    let fft: std::sync::Arc<dyn Fft<f64>> = match direction {
        Direction::DelayToFrequency => planner.plan_fft_forward(n),
        Direction::FrequencyToDelay => planner.plan_fft_inverse(n),
    };
    let norm = 1.0 / (n as f64).sqrt();
    let mut column = vec![Complex64::new(0.0, 0.0); n];
    for tx in 0..h.n_tx {
        for (k, c) in column.iter_mut().enumerate() {
            *c = h.get(k, tx);
        }
        fft.process(&mut column);
        for (k, c) in column.iter().enumerate() {
            h.set(k, tx, c * norm);
        }
    }
}

/// Affine map between raw delay-domain values and the normalized planes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub offset: f64,
    pub gain: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        offset: 0.0,
        gain: 1.0,
    };

    pub fn new(offset: f64, gain: f64) -> Result<Self> {
        if !(offset.is_finite() && gain.is_finite() && gain > 0.0) {
            return Err(Error::Config(format!(
                "invalid normalization (offset {offset}, gain {gain})"
            )));
        }
        Ok(Self { offset, gain })
    }

    /// Zero-centered fit: `gain` is the largest magnitude over all raw planes.
    pub fn fit<'a>(raw_planes: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let max_abs = raw_planes
            .into_iter()
            .flat_map(|p| p.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            offset: 0.0,
            gain: if max_abs > 0.0 { max_abs } else { 1.0 },
        }
    }

    #[inline]
    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.gain
    }

    #[inline]
    pub fn denormalize(&self, value: f64) -> f64 {
        value * self.gain + self.offset
    }
}

/// Preprocessed channel: planes of shape `2 × n_delay × n_tx` in C order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    pub n_delay: usize,
    pub n_tx: usize,
    pub planes: Vec<f64>,
    pub scale: Normalization,
}

impl ChannelTensor {
    pub fn new(
        n_delay: usize,
        n_tx: usize,
        planes: Vec<f64>,
        scale: Normalization,
    ) -> Result<Self> {
        if planes.len() != 2 * n_delay * n_tx {
            return Err(Error::Dimension(format!(
                "expected {} plane entries for 2x{}x{}, got {}",
                2 * n_delay * n_tx,
                n_delay,
                n_tx,
                planes.len()
            )));
        }
        Ok(Self {
            n_delay,
            n_tx,
            planes,
            scale,
        })
    }

    pub fn zeros(n_delay: usize, n_tx: usize, scale: Normalization) -> Self {
        Self {
            n_delay,
            n_tx,
            planes: vec![0.0; 2 * n_delay * n_tx],
            scale,
        }
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    #[inline]
    pub fn index(plane: usize, delay: usize, tx: usize, n_delay: usize, n_tx: usize) -> usize {
        (plane * n_delay + delay) * n_tx + tx
    }

    /// Planes with the normalization undone.
    pub fn raw_planes(&self) -> Vec<f64> {
        self.planes
            .iter()
            .map(|&v| self.scale.denormalize(v))
            .collect()
    }

    /// Raw delay-domain taps as complex values, row-major (delay, antenna).
    pub fn raw_delay_taps(&self) -> Vec<Complex64> {
        let plane = self.n_delay * self.n_tx;
        (0..plane)
            .map(|i| {
                Complex64::new(
                    self.scale.denormalize(self.planes[i]),
                    self.scale.denormalize(self.planes[plane + i]),
                )
            })
            .collect()
    }

    pub fn same_shape(&self, other: &ChannelTensor) -> bool {
        self.n_delay == other.n_delay && self.n_tx == other.n_tx
    }
}

/// Draws one synthetic channel.
///
/// `n_paths` distinct delays are drawn uniformly from `0..n_delay`. Each path
/// has a circular Gaussian gain with variance proportional to
/// `exp(-decay * delay)` and a departure angle with `sin θ ~ U(-1, 1)`; the gain
/// reaches antenna `t` through the half-wavelength array phase `exp(jπ t sin θ)`.
/// Variances are scaled to sum to `n_subcarriers`, so
/// `E[|H|_F^2] = n_subcarriers * n_tx`.
pub fn generate_channel(cfg: &ChannelConfig) -> Result<FrequencyChannel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut delays = index::sample(&mut rng, cfg.n_delay, cfg.n_paths).into_vec();
    delays.sort_unstable();

    let weights: Vec<f64> = delays
        .iter()
        .map(|&d| (-cfg.decay * d as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let variances: Vec<f64> = weights
        .iter()
        .map(|w| w / total * cfg.n_subcarriers as f64)
        .collect();

    let mut delay_domain = FrequencyChannel::zeros(cfg.n_subcarriers, cfg.n_tx);
    for (&d, &var) in delays.iter().zip(&variances) {
        let sigma = (var / 2.0).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let gain = Complex64::new(sigma * re, sigma * im);
        let sin_theta: f64 = rng.random_range(-1.0..1.0);
        for tx in 0..cfg.n_tx {
            let phase = Complex64::from_polar(1.0, PI * tx as f64 * sin_theta);
            delay_domain.set(d, tx, gain * phase);
        }
    }
    Ok(FrequencyChannel::from_delay_domain(&delay_domain))
}

/// Raw (unnormalized) truncated delay-domain planes, `2 × n_delay × n_tx`.
pub fn truncated_delay_planes(h: &FrequencyChannel, cfg: &ChannelConfig) -> Result<Vec<f64>> {
    check_frequency_shape(h, cfg)?;
    let delay = h.to_delay_domain();
    let plane = cfg.n_delay * cfg.n_tx;
    let mut planes = vec![0.0; 2 * plane];
    for d in 0..cfg.n_delay {
        for tx in 0..cfg.n_tx {
            let c = delay.get(d, tx);
            planes[d * cfg.n_tx + tx] = c.re;
            planes[plane + d * cfg.n_tx + tx] = c.im;
        }
    }
    Ok(planes)
}

/// Preprocesses one channel, fitting the normalization to this channel alone.
pub fn preprocess(h: &FrequencyChannel, cfg: &ChannelConfig) -> Result<ChannelTensor> {
    let raw = truncated_delay_planes(h, cfg)?;
    let scale = Normalization::fit([raw.as_slice()]);
    ChannelTensor::new(cfg.n_delay, cfg.n_tx, normalize_planes(raw, &scale), scale)
}

/// Preprocesses one channel with a shared (dataset-level) normalization.
///
/// Fails with a numeric error if a normalized entry leaves `[-1, 1]`.
pub fn preprocess_with(
    h: &FrequencyChannel,
    cfg: &ChannelConfig,
    scale: Normalization,
) -> Result<ChannelTensor> {
    let raw = truncated_delay_planes(h, cfg)?;
    let planes = normalize_planes(raw, &scale);
    if let Some(v) = planes.iter().find(|v| v.abs() > 1.0) {
        return Err(Error::Numeric(format!(
            "normalized entry {v} outside [-1, 1]; normalization does not cover this channel"
        )));
    }
    ChannelTensor::new(cfg.n_delay, cfg.n_tx, planes, scale)
}

fn normalize_planes(mut raw: Vec<f64>, scale: &Normalization) -> Vec<f64> {
    for v in raw.iter_mut() {
        *v = scale.normalize(*v);
    }
    raw
}

/// Preprocesses a batch with one normalization fitted across all of it.
pub fn preprocess_dataset(
    hs: &[FrequencyChannel],
    cfg: &ChannelConfig,
) -> Result<Vec<ChannelTensor>> {
    let raws = hs
        .iter()
        .map(|h| truncated_delay_planes(h, cfg))
        .collect::<Result<Vec<_>>>()?;
    let scale = Normalization::fit(raws.iter().map(Vec::as_slice));
    raws.into_iter()
        .map(|raw| ChannelTensor::new(cfg.n_delay, cfg.n_tx, normalize_planes(raw, &scale), scale))
        .collect()
}

/// Generates `count` channels with per-sample seeds derived from `cfg.seed`.
pub fn generate_frequency_channels(
    cfg: &ChannelConfig,
    count: usize,
) -> Result<Vec<FrequencyChannel>> {
    cfg.validate()?;
    (0..count as u64)
        .map(|i| generate_channel(&cfg.for_sample(i)))
        .collect()
}

/// Generates and preprocesses a dataset sharing one normalization.
pub fn generate_dataset(cfg: &ChannelConfig, count: usize) -> Result<Vec<ChannelTensor>> {
    let hs = generate_frequency_channels(cfg, count)?;
    preprocess_dataset(&hs, cfg)
}

/// Inverse of preprocessing: de-normalize, zero-pad the delay axis, unitary DFT.
pub fn postprocess(t: &ChannelTensor, cfg: &ChannelConfig) -> Result<FrequencyChannel> {
    if t.n_delay != cfg.n_delay || t.n_tx != cfg.n_tx || t.planes.len() != 2 * t.n_delay * t.n_tx {
        return Err(Error::Dimension(format!(
            "tensor 2x{}x{} does not match config 2x{}x{}",
            t.n_delay, t.n_tx, cfg.n_delay, cfg.n_tx
        )));
    }
    let mut delay = FrequencyChannel::zeros(cfg.n_subcarriers, cfg.n_tx);
    for (i, c) in t.raw_delay_taps().into_iter().enumerate() {
        delay.set(i / cfg.n_tx, i % cfg.n_tx, c);
    }
    Ok(FrequencyChannel::from_delay_domain(&delay))
}

/// `|h - h_hat|_F^2 / |h|_F^2` on de-normalized planes.
pub fn nmse(h: &ChannelTensor, h_hat: &ChannelTensor) -> Result<f64> {
    if !h.same_shape(h_hat) || h.planes.len() != h_hat.planes.len() {
        return Err(Error::Dimension(format!(
            "nmse of 2x{}x{} against 2x{}x{}",
            h.n_delay, h.n_tx, h_hat.n_delay, h_hat.n_tx
        )));
    }
    let reference = h.raw_planes();
    let estimate = h_hat.raw_planes();
    nmse_slices(&reference, &estimate)
}

/// NMSE over the full band, against the original frequency-domain channel.
pub fn nmse_full_band(
    h: &FrequencyChannel,
    h_hat: &ChannelTensor,
    cfg: &ChannelConfig,
) -> Result<f64> {
    check_frequency_shape(h, cfg)?;
    let reconstructed = postprocess(h_hat, cfg)?;
    let num: f64 = h
        .data
        .iter()
        .zip(&reconstructed.data)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    let den = h.frobenius_norm_sqr();
    if den <= 0.0 {
        return Err(Error::Numeric("nmse reference has zero norm".into()));
    }
    Ok(num / den)
}

pub(crate) fn nmse_slices(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    let den: f64 = reference.iter().map(|v| v * v).sum();
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::Numeric("nmse reference has zero norm".into()));
    }
    let num: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(num / den)
}

fn check_frequency_shape(h: &FrequencyChannel, cfg: &ChannelConfig) -> Result<()> {
    if h.n_subcarriers != cfg.n_subcarriers
        || h.n_tx != cfg.n_tx
        || h.data.len() != h.n_subcarriers * h.n_tx
    {
        return Err(Error::Dimension(format!(
            "channel {}x{} does not match config {}x{}",
            h.n_subcarriers, h.n_tx, cfg.n_subcarriers, cfg.n_tx
        )));
    }
    Ok(())
}
