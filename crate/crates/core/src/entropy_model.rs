//! Factorized logistic entropy model.
//!
//! Every latent channel `c` has its own logistic distribution with location
//! `μ_c` and scale `s_c = exp(ρ_c)`, shared across spatial positions. The mass
//! of a quantization bin is a difference of logistic CDFs, so the masses of
//! bins `2n` and `2n+1` at step `Δ` add up to the mass of bin `n` at `2Δ`.
//!
//! Interval masses are evaluated in log space through
//! `σ(a) - σ(b) = σ(a)·σ(-b)·(1 - e^(b-a))`, which stays accurate far in the
//! tails and for narrow intervals.

use crate::error::{Error, Result};
use crate::quantizer::{LatentTensor, QuantLadder, SymbolTensor};

pub const MODEL_VERSION: u8 = 1;
pub const PMF_PRECISION: u32 = 16;
pub const PMF_TOTAL: u32 = 1 << PMF_PRECISION;
pub const DEFAULT_TAIL_MASS: f64 = 1e-9;

/// Per-channel logistic parameters `(μ_c, ρ_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyModelParams {
    pub loc: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl EntropyModelParams {
    pub fn new(loc: Vec<f64>, log_scale: Vec<f64>) -> Result<Self> {
        if loc.len() != log_scale.len() {
            return Err(Error::Dimension(format!(
                "{} locations but {} log-scales",
                loc.len(),
                log_scale.len()
            )));
        }
        if loc.iter().chain(&log_scale).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "entropy model parameters must be finite".into(),
            ));
        }
        Ok(Self { loc, log_scale })
    }

    /// `μ = 0`, `s = 1` for every channel.
    pub fn standard(channels: usize) -> Self {
        Self {
            loc: vec![0.0; channels],
            log_scale: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.loc.len()
    }

    pub fn scale(&self, channel: usize) -> f64 {
        self.log_scale[channel].exp()
    }

    pub fn parameter_count(&self) -> usize {
        self.loc.len() + self.log_scale.len()
    }

    pub fn version(&self) -> u8 {
        MODEL_VERSION
    }

    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        sigmoid((x - self.loc[channel]) / self.scale(channel))
    }

    /// Natural log of the mass of `[lo, hi)`.
    pub fn log_interval_mass(&self, channel: usize, lo: f64, hi: f64) -> f64 {
        let s = self.scale(channel);
        let mu = self.loc[channel];
        log_interval(((hi - mu) / s, (lo - mu) / s)).log_mass
    }

    fn check_channel(&self, channel: usize) -> Result<()> {
        if channel >= self.channels() {
            return Err(Error::Dimension(format!(
                "channel {channel} outside model with {} channels",
                self.channels()
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`.
#[inline]
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Log-mass of a standardized interval and its partials with respect to the
/// upper endpoint `a` and lower endpoint `b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct IntervalLogMass {
    pub log_mass: f64,
    pub d_upper: f64,
    pub d_lower: f64,
}

#[inline]
pub(crate) fn log_interval((a, b): (f64, f64)) -> IntervalLogMass {
    let width = a - b;
    let em1 = width.exp_m1();
    let log_mass = log_sigmoid(a) + log_sigmoid(-b) + (-(-width).exp_m1()).ln();
    IntervalLogMass {
        log_mass,
        d_upper: sigmoid(-a) + 1.0 / em1,
        d_lower: -sigmoid(b) - 1.0 / em1,
    }
}

/// Probability of symbol `n` at `step`: `c((n+1)Δ) - c(nΔ)`.
pub fn bin_probability(
    params: &EntropyModelParams,
    channel: usize,
    n: i32,
    step: f64,
) -> Result<f64> {
    Ok(log_bin_probability(params, channel, n, step)?.exp())
}

pub fn log_bin_probability(
    params: &EntropyModelParams,
    channel: usize,
    n: i32,
    step: f64,
) -> Result<f64> {
    params.check_channel(channel)?;
    let lo = n as f64 * step;
    let hi = (n as f64 + 1.0) * step;
    Ok(params.log_interval_mass(channel, lo, hi))
}

/// Rate of a latent and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RateGradients {
    pub nats: f64,
    pub d_latent: Vec<f64>,
    pub d_loc: Vec<f64>,
    pub d_log_scale: Vec<f64>,
}

fn check_latent(params: &EntropyModelParams, latent: &LatentTensor) -> Result<()> {
    if latent.shape.channels != params.channels() {
        return Err(Error::Dimension(format!(
            "latent has {} channels, entropy model has {}",
            latent.shape.channels,
            params.channels()
        )));
    }
    Ok(())
}

/// `Σ -ln(c(v + Δ/2) - c(v - Δ/2))` over every latent entry `v`.
pub fn rate_nats(params: &EntropyModelParams, latent: &LatentTensor, step: f64) -> Result<f64> {
    check_latent(params, latent)?;
    let half = 0.5 * step;
    let plane = latent.shape.plane_len();
    let mut total = 0.0;
    for c in 0..params.channels() {
        let (mu, s) = (params.loc[c], params.scale(c));
        for &v in &latent.data[c * plane..(c + 1) * plane] {
            total -= log_interval(((v + half - mu) / s, (v - half - mu) / s)).log_mass;
        }
    }
    Ok(total)
}

/// [`rate_nats`] together with its partials with respect to every latent
/// entry and every `(μ_c, ρ_c)`.
pub fn rate_nats_with_gradients(
    params: &EntropyModelParams,
    latent: &LatentTensor,
    step: f64,
) -> Result<RateGradients> {
    check_latent(params, latent)?;
    let half = 0.5 * step;
    let plane = latent.shape.plane_len();
    let channels = params.channels();
    let mut out = RateGradients {
        nats: 0.0,
        d_latent: vec![0.0; latent.data.len()],
        d_loc: vec![0.0; channels],
        d_log_scale: vec![0.0; channels],
    };
    for c in 0..channels {
        let (mu, s) = (params.loc[c], params.scale(c));
        for i in c * plane..(c + 1) * plane {
            let v = latent.data[i];
            let a = (v + half - mu) / s;
            let b = (v - half - mu) / s;
            let m = log_interval((a, b));
            out.nats -= m.log_mass;
            let d_shift = -(m.d_upper + m.d_lower) / s;
            out.d_latent[i] = d_shift;
            out.d_loc[c] -= d_shift;
            out.d_log_scale[c] += m.d_upper * a + m.d_lower * b;
        }
    }
    Ok(out)
}

/// Ideal code length in bits of `symbols` under the model: `Σ -log2 p(n)`.
pub fn model_cross_entropy(params: &EntropyModelParams, symbols: &SymbolTensor) -> Result<f64> {
    if symbols.shape.channels != params.channels() {
        return Err(Error::Dimension(format!(
            "symbols have {} channels, entropy model has {}",
            symbols.shape.channels,
            params.channels()
        )));
    }
    let step = symbols.step();
    let mut nats = 0.0;
    for c in 0..params.channels() {
        for &n in symbols.channel(c) {
            nats -= log_bin_probability(params, c, n, step)?;
        }
    }
    Ok(nats / std::f64::consts::LN_2)
}

/// Fixed-point PMF of one channel at one level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PmfTable {
    pub n_min: i32,
    pub freqs: Vec<u32>,
    /// `cumulative[i]` is the sum of `freqs[..i]`; last entry is `PMF_TOTAL`.
    pub cumulative: Vec<u32>,
}

impl PmfTable {
    /// Builds a table from integer frequencies that already sum to [`PMF_TOTAL`].
    pub fn from_frequencies(n_min: i32, freqs: Vec<u32>) -> Result<Self> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(Error::Precision(
                "every table symbol needs frequency >= 1".into(),
            ));
        }
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cumulative.push(0);
        for &f in &freqs {
            acc += f as u64;
            if acc > PMF_TOTAL as u64 {
                return Err(Error::Precision("frequencies exceed table total".into()));
            }
            cumulative.push(acc as u32);
        }
        if acc != PMF_TOTAL as u64 {
            return Err(Error::Precision(format!(
                "frequencies sum to {acc}, expected {PMF_TOTAL}"
            )));
        }
        if (n_min as i64) + freqs.len() as i64 - 1 > i32::MAX as i64 {
            return Err(Error::Precision(
                "table range overflows 32-bit symbols".into(),
            ));
        }
        Ok(Self {
            n_min,
            freqs,
            cumulative,
        })
    }

    pub fn n_max(&self) -> i32 {
        self.n_min + self.freqs.len() as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn contains(&self, n: i32) -> bool {
        n >= self.n_min && n <= self.n_max()
    }

    /// `(start, freq)` of an in-range symbol.
    #[inline]
    pub fn interval(&self, n: i32) -> (u32, u32) {
        let i = (n - self.n_min) as usize;
        (self.cumulative[i], self.freqs[i])
    }

    /// Symbol whose interval contains `slot` (`slot < PMF_TOTAL`).
    #[inline]
    pub fn symbol_for_slot(&self, slot: u32) -> i32 {
        let i = self.cumulative.partition_point(|&c| c <= slot) - 1;
        self.n_min + i as i32
    }

    pub fn probability(&self, n: i32) -> f64 {
        if !self.contains(n) {
            return 0.0;
        }
        self.interval(n).1 as f64 / PMF_TOTAL as f64
    }

    /// Clamps a symbol into the table range, reporting whether it moved.
    pub fn fold(&self, n: i32) -> (i32, bool) {
        let folded = n.clamp(self.n_min, self.n_max());
        (folded, folded != n)
    }
}

/// Per-channel tables for one ladder level.
#[derive(Debug, Clone, PartialEq)]
pub struct PmfTables {
    pub level: usize,
    pub step: f64,
    pub tables: Vec<PmfTable>,
}

impl PmfTables {
    pub fn channels(&self) -> usize {
        self.tables.len()
    }

    /// Ideal code length in bits of `symbols` under the integer tables.
    pub fn cross_entropy_bits(&self, symbols: &SymbolTensor) -> Result<f64> {
        let plane = symbols.shape.plane_len();
        let mut bits = 0.0;
        for (i, &n) in symbols.symbols.iter().enumerate() {
            let table = self
                .tables
                .get(i / plane.max(1))
                .ok_or_else(|| Error::Dimension("symbols have more channels than tables".into()))?;
            let p = table.probability(n);
            if p == 0.0 {
                return Err(Error::CoderDomain {
                    channel: i / plane,
                    symbol: n,
                    min: table.n_min,
                    max: table.n_max(),
                });
            }
            bits -= p.log2();
        }
        Ok(bits)
    }
}

/// Quantizes the model at `level` into 16-bit frequency tables.
///
/// The symbol range of each channel leaves less than `tail_mass` outside; that
/// mass is folded into the two edge bins. Bins worth less than one count are
/// pinned at one and the rest of the budget is split over the others by
/// largest-remainder rounding.
pub fn build_pmf_tables(
    params: &EntropyModelParams,
    ladder: &QuantLadder,
    level: usize,
    tail_mass: f64,
) -> Result<PmfTables> {
    ladder.check_level(level)?;
    if !(tail_mass > 0.0 && tail_mass <= 1e-6) {
        return Err(Error::Config(format!(
            "tail mass {tail_mass} must lie in (0, 1e-6]"
        )));
    }
    let step = ladder.step(level);
    let tables = (0..params.channels())
        .map(|c| build_channel_table(params, c, step, tail_mass))
        .collect::<Result<Vec<_>>>()?;
    Ok(PmfTables {
        level,
        step,
        tables,
    })
}

/// Inclusive symbol range with less than `tail_mass` outside.
pub fn symbol_range(
    params: &EntropyModelParams,
    channel: usize,
    step: f64,
    tail_mass: f64,
) -> Result<(i32, i32)> {
    params.check_channel(channel)?;
    let half_tail = 0.5 * tail_mass;
    // logit(t/2); the upper quantile uses its exact negation
    let z = half_tail.ln() - (-half_tail).ln_1p();
    let (mu, s) = (params.loc[channel], params.scale(channel));
    let lo = ((mu + s * z) / step).floor();
    let hi = ((mu - s * z) / step).ceil() - 1.0;
    if lo < i32::MIN as f64 || hi > i32::MAX as f64 {
        return Err(Error::Precision(format!(
            "symbol range [{lo}, {hi}] of channel {channel} overflows 32 bits"
        )));
    }
    Ok((lo as i32, hi as i32))
}

fn build_channel_table(
    params: &EntropyModelParams,
    c: usize,
    step: f64,
    tail_mass: f64,
) -> Result<PmfTable> {
    let (n_min, n_max) = symbol_range(params, c, step, tail_mass)?;
    let range = (n_max as i64 - n_min as i64 + 1) as usize;
    if range > PMF_TOTAL as usize {
        return Err(Error::Precision(format!(
            "channel {c} needs {range} symbols at step {step}; at most {PMF_TOTAL} fit at {PMF_PRECISION}-bit precision"
        )));
    }

    let (mu, s) = (params.loc[c], params.scale(c));
    let mut probs: Vec<f64> = (n_min..=n_max)
        .map(|n| log_bin_probability(params, c, n, step).map(f64::exp))
        .collect::<Result<_>>()?;
    probs[0] += sigmoid((n_min as f64 * step - mu) / s);
    probs[range - 1] += sigmoid(-((n_max as f64 + 1.0) * step - mu) / s);
    let total: f64 = probs.iter().sum();

    // bins whose share falls below one count are pinned at one; the rest of the
    // budget is rescaled over the others until the pinned set stops growing
    let mut pinned = vec![false; range];
    let mut scale = PMF_TOTAL as f64 / total;
    loop {
        let mut grew = false;
        for (i, p) in probs.iter().enumerate() {
            if !pinned[i] && p * scale < 1.0 {
                pinned[i] = true;
                grew = true;
            }
        }
        let free_mass: f64 = probs
            .iter()
            .zip(&pinned)
            .filter(|(_, &f)| !f)
            .map(|(p, _)| p)
            .sum();
        let free_budget = PMF_TOTAL as f64 - pinned.iter().filter(|&&f| f).count() as f64;
        if free_mass <= 0.0 {
            break;
        }
        scale = free_budget / free_mass;
        if !grew {
            break;
        }
    }

    let mut freqs = Vec::with_capacity(range);
    let mut remainders = Vec::with_capacity(range);
    let mut assigned: i64 = 0;
    for (i, p) in probs.iter().enumerate() {
        if pinned[i] {
            freqs.push(1);
            assigned += 1;
            continue;
        }
        let ideal = p * scale;
        let whole = ideal.floor().max(1.0);
        freqs.push(whole as u32);
        remainders.push((ideal - whole, i));
        assigned += whole as i64;
    }
    let mut leftover = PMF_TOTAL as i64 - assigned;
    // largest remainder first; ties go to the lower symbol
    remainders.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut k = 0;
    while leftover > 0 {
        let i = if remainders.is_empty() {
            k % range
        } else {
            remainders[k % remainders.len()].1
        };
        freqs[i] += 1;
        leftover -= 1;
        k += 1;
    }
    while leftover < 0 {
        // only reachable through accumulated float error; shave the largest bin
        let (i, _) = freqs.iter().enumerate().max_by_key(|(_, &f)| f).unwrap();
        freqs[i] -= 1;
        leftover += 1;
    }
    PmfTable::from_frequencies(n_min, freqs)
}
