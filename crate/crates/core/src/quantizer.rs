//! Nested-lattice uniform scalar quantization.
//!
//! Level `k` of a [`QuantLadder`] uses step `Δ_k = Δ₀·2^k`, bins
//! `[nΔ_k, (n+1)Δ_k)` and reconstruction points `(n + 0.5)Δ_k`. Every bin at
//! level `k+1` is the union of bins `2n` and `2n+1` at level `k`, so coarsening
//! a symbol is an arithmetic right shift and histograms aggregate pairwise.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Step-doubling family of uniform quantizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantLadder {
    base_step: f64,
    n_levels: usize,
}

impl QuantLadder {
    pub fn new(base_step: f64, n_levels: usize) -> Result<Self> {
        if !(base_step.is_finite() && base_step > 0.0) {
            return Err(Error::Config(format!(
                "base step {base_step} must be positive"
            )));
        }
        if n_levels == 0 || n_levels > 32 {
            return Err(Error::Config(format!(
                "ladder needs 1..=32 levels, got {n_levels}"
            )));
        }
        Ok(Self {
            base_step,
            n_levels,
        })
    }

    pub fn base_step(&self) -> f64 {
        self.base_step
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    /// `Δ₀·2^k`, computed in one expression so adjacent steps differ by exactly 2.
    pub fn step(&self, level: usize) -> f64 {
        self.base_step * 2f64.powi(level as i32)
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.n_levels {
            return Err(Error::Ladder {
                level,
                n_levels: self.n_levels,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries per channel (spatial positions).
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Channel of the entry at raster index `i` (channel-major order).
    #[inline]
    pub fn channel_of(&self, i: usize) -> usize {
        i / self.plane_len()
    }
}

/// Continuous analysis-transform output, `C × H × W` in C order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub shape: LatentShape,
    pub data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(shape: LatentShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "latent {}x{}x{} needs {} entries, got {}",
                shape.channels,
                shape.height,
                shape.width,
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Lattice indices of a quantized latent at one ladder level.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolTensor {
    pub shape: LatentShape,
    pub symbols: Vec<i32>,
    pub level: usize,
    pub ladder: QuantLadder,
}

impl SymbolTensor {
    pub fn new(
        shape: LatentShape,
        symbols: Vec<i32>,
        level: usize,
        ladder: QuantLadder,
    ) -> Result<Self> {
        ladder.check_level(level)?;
        if symbols.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "symbol tensor needs {} entries, got {}",
                shape.len(),
                symbols.len()
            )));
        }
        Ok(Self {
            shape,
            symbols,
            level,
            ladder,
        })
    }

    pub fn step(&self) -> f64 {
        self.ladder.step(self.level)
    }

    /// Symbols of channel `c`.
    pub fn channel(&self, c: usize) -> &[i32] {
        let n = self.shape.plane_len();
        &self.symbols[c * n..(c + 1) * n]
    }
}

/// Lattice index `floor(y / Δ)` of a single value.
#[inline]
pub fn quantize_value(y: f64, step: f64) -> Result<i32> {
    if !y.is_finite() {
        return Err(Error::Numeric(format!(
            "cannot quantize non-finite value {y}"
        )));
    }
    let n = (y / step).floor();
    if n < i32::MIN as f64 || n > i32::MAX as f64 {
        return Err(Error::Numeric(format!(
            "lattice index {n} for value {y} at step {step} overflows 32 bits"
        )));
    }
    Ok(n as i32)
}

/// Reconstruction point `(n + 0.5)Δ`.
#[inline]
pub fn reconstruct(n: i32, step: f64) -> f64 {
    (n as f64 + 0.5) * step
}

pub fn quantize(y: &LatentTensor, ladder: &QuantLadder, level: usize) -> Result<SymbolTensor> {
    ladder.check_level(level)?;
    let step = ladder.step(level);
    let symbols = y
        .data
        .iter()
        .map(|&v| quantize_value(v, step))
        .collect::<Result<Vec<_>>>()?;
    Ok(SymbolTensor {
        shape: y.shape,
        symbols,
        level,
        ladder: *ladder,
    })
}

pub fn dequantize(s: &SymbolTensor) -> LatentTensor {
    let step = s.step();
    LatentTensor {
        shape: s.shape,
        data: s.symbols.iter().map(|&n| reconstruct(n, step)).collect(),
    }
}

/// Moves `levels` rungs up the ladder: `n' = floor(n / 2^levels)`.
pub fn coarsen(s: &SymbolTensor, levels: usize) -> Result<SymbolTensor> {
    let target = s.level + levels;
    s.ladder.check_level(target)?;
    Ok(SymbolTensor {
        shape: s.shape,
        // arithmetic shift is floor division toward -inf
        symbols: s.symbols.iter().map(|&n| n >> levels).collect(),
        level: target,
        ladder: s.ladder,
    })
}

pub type Histogram = BTreeMap<i32, u64>;

pub fn histogram(symbols: &[i32]) -> Histogram {
    let mut h = Histogram::new();
    for &n in symbols {
        *h.entry(n).or_insert(0) += 1;
    }
    h
}

/// Histogram one level coarser: bins `2n` and `2n+1` merge into `n`.
pub fn aggregate_histogram(h: &Histogram) -> Histogram {
    let mut out = Histogram::new();
    for (&n, &count) in h {
        *out.entry(n >> 1).or_insert(0) += count;
    }
    out
}

/// Shannon entropy in bits of a histogram given by its counts.
pub fn entropy_of_counts<I: IntoIterator<Item = u64>>(counts: I) -> f64 {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let h = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    h.max(0.0)
}

/// Empirical entropy in bits per symbol.
///
/// With `per_channel`, each channel gets its own histogram and the result is
/// the entry-weighted mean of the channel entropies; otherwise one histogram
/// is pooled over the whole tensor.
pub fn empirical_entropy(s: &SymbolTensor, per_channel: bool) -> f64 {
    if s.symbols.is_empty() {
        return 0.0;
    }
    if !per_channel {
        return entropy_of_counts(histogram(&s.symbols).into_values());
    }
    let total = s.symbols.len() as f64;
    (0..s.shape.channels)
        .map(|c| {
            let ch = s.channel(c);
            entropy_of_counts(histogram(ch).into_values()) * ch.len() as f64 / total
        })
        .sum()
}
