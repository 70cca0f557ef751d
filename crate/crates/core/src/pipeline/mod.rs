//! End-to-end codec: analysis, quantization, entropy coding and framing,
//! plus level selection against a feedback budget and rate-distortion sweeps.

mod bitstream;
pub mod exchange;
pub mod selftest;

use std::fmt::Write as _;
use std::thread;

pub use bitstream::{Bitstream, BITSTREAM_HEADER_LEN, BITSTREAM_MAGIC, BITSTREAM_VERSION};

use crate::channel::{nmse, ChannelTensor, Normalization};
use crate::coder::{decode_symbols, encode_symbols};
use crate::entropy_model::{
    build_pmf_tables, model_cross_entropy, EntropyModelParams, PmfTables, DEFAULT_TAIL_MASS,
};
use crate::error::{Error, Result};
use crate::quantizer::{dequantize, quantize, QuantLadder, SymbolTensor};
use crate::transform::{analyze, analyze_batch, synthesize, TransformParams, WeightFile};

/// Checksum bytes plus the flushed rANS state, per payload.
const PAYLOAD_OVERHEAD_BITS: f64 = 64.0;

/// Transform, entropy model and ladder with coding tables for every level.
#[derive(Debug, Clone)]
pub struct CodecModel {
    pub id: String,
    pub transform: TransformParams,
    pub entropy: EntropyModelParams,
    pub ladder: QuantLadder,
    pub lambda: f64,
    tables: Vec<PmfTables>,
}

impl CodecModel {
    pub fn new(
        id: impl Into<String>,
        transform: TransformParams,
        entropy: EntropyModelParams,
        ladder: QuantLadder,
        lambda: f64,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.contains([',', '\n', '\r']) {
            return Err(Error::Config(format!(
                "model id {id:?} must be nonempty without commas or newlines"
            )));
        }
        let channels = transform.latent_shape().channels;
        if entropy.channels() != channels {
            return Err(Error::Config(format!(
                "entropy model has {} channels, transform latent has {channels}",
                entropy.channels()
            )));
        }
        let tables = (0..ladder.n_levels())
            .map(|k| build_pmf_tables(&entropy, &ladder, k, DEFAULT_TAIL_MASS))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            transform,
            entropy,
            ladder,
            lambda,
            tables,
        })
    }

    pub fn from_weights(id: impl Into<String>, w: WeightFile) -> Result<Self> {
        Self::new(id, w.transform, w.entropy, w.ladder, w.lambda)
    }

    pub fn to_weights(&self, scale: Normalization) -> WeightFile {
        WeightFile {
            transform: self.transform.clone(),
            entropy: self.entropy.clone(),
            scale,
            lambda: self.lambda,
            ladder: self.ladder,
        }
    }

    pub fn tables(&self, level: usize) -> Result<&PmfTables> {
        self.ladder.check_level(level)?;
        Ok(&self.tables[level])
    }
}

/// Side information from one encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EncodeDiagnostics {
    /// Symbols clamped into the coding range of their channel.
    pub fold_events: usize,
}

fn level_byte(level: usize) -> Result<u8> {
    u8::try_from(level).map_err(|_| Error::Format(format!("level {level} does not fit in a byte")))
}

fn fold_symbols(s: &mut SymbolTensor, tables: &PmfTables) -> usize {
    let plane = s.shape.plane_len();
    let mut folds = 0;
    for (i, n) in s.symbols.iter_mut().enumerate() {
        let (folded, moved) = tables.tables[i / plane].fold(*n);
        *n = folded;
        folds += moved as usize;
    }
    folds
}

/// Symbols the decoder will see for `h` at `level`.
pub fn encode_symbols_for(
    h: &ChannelTensor,
    model: &CodecModel,
    level: usize,
) -> Result<(SymbolTensor, usize)> {
    let tables = model.tables(level)?;
    let y = analyze(h, &model.transform)?;
    let mut s = quantize(&y, &model.ladder, level)?;
    let folds = fold_symbols(&mut s, tables);
    Ok((s, folds))
}

pub fn encode_csi_with_diagnostics(
    h: &ChannelTensor,
    model: &CodecModel,
    level: usize,
) -> Result<(Bitstream, EncodeDiagnostics)> {
    let (s, fold_events) = encode_symbols_for(h, model, level)?;
    let payload = encode_symbols(&s, model.tables(level)?)?;
    Ok((
        Bitstream {
            level: level_byte(level)?,
            shape: s.shape,
            scale: h.scale,
            payload,
        },
        EncodeDiagnostics { fold_events },
    ))
}

/// analyze → quantize at `level` → entropy-code with the level tables → frame.
pub fn encode_csi(h: &ChannelTensor, model: &CodecModel, level: usize) -> Result<Bitstream> {
    Ok(encode_csi_with_diagnostics(h, model, level)?.0)
}

/// entropy-decode → dequantize → synthesize.
pub fn decode_csi(s: &Bitstream, model: &CodecModel) -> Result<ChannelTensor> {
    let level = s.level as usize;
    if level >= model.ladder.n_levels() {
        return Err(Error::Format(format!(
            "stream level {level} beyond the model's {} levels",
            model.ladder.n_levels()
        )));
    }
    let shape = model.transform.latent_shape();
    if s.shape != shape {
        return Err(Error::Format(format!(
            "stream latent {:?} does not match model latent {shape:?}",
            s.shape
        )));
    }
    let symbols = decode_symbols(&s.payload, model.tables(level)?, shape, &model.ladder)?;
    synthesize(&dequantize(&symbols), &model.transform, s.scale)
}

/// Parses and decodes a serialized stream.
pub fn decode_csi_bytes(data: &[u8], model: &CodecModel) -> Result<ChannelTensor> {
    decode_csi(&Bitstream::from_bytes(data)?, model)
}

/// Reconstruction through the quantized path without serialization.
pub fn reconstruct_in_process(
    h: &ChannelTensor,
    model: &CodecModel,
    level: usize,
) -> Result<ChannelTensor> {
    let (s, _) = encode_symbols_for(h, model, level)?;
    synthesize(&dequantize(&s), &model.transform, h.scale)
}

/// Feedback capacity `C_f` in bits per feedback instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBudget {
    bits: f64,
}

impl RateBudget {
    pub fn new(bits: f64) -> Result<Self> {
        if !(bits.is_finite() && bits > 0.0) {
            return Err(Error::Config(format!(
                "capacity {bits} must be positive and finite"
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> f64 {
        self.bits
    }
}

/// Finest level whose expected stream length fits the budget.
pub fn select_level(expected_bits_per_level: &[f64], budget: RateBudget) -> Result<usize> {
    let Some(&coarsest) = expected_bits_per_level.last() else {
        return Err(Error::Config("no levels to select from".into()));
    };
    if expected_bits_per_level
        .iter()
        .any(|b| !b.is_finite() || *b < 0.0)
    {
        return Err(Error::Config(
            "expected bits must be finite and nonnegative".into(),
        ));
    }
    if let Some(k) = expected_bits_per_level.windows(2).position(|w| w[1] > w[0]) {
        return Err(Error::Config(format!(
            "expected bits increase from level {k} to {}: {} < {}",
            k + 1,
            expected_bits_per_level[k],
            expected_bits_per_level[k + 1]
        )));
    }
    expected_bits_per_level
        .iter()
        .position(|&b| b <= budget.bits())
        .ok_or(Error::InsufficientCapacity {
            needed_bits: coarsest,
            budget_bits: budget.bits(),
        })
}

/// Mean of `ℓ(s) / (n_delay · n_tx)` over the streams.
pub fn bits_per_entry(streams: &[Bitstream], n_delay: usize, n_tx: usize) -> Result<f64> {
    if streams.is_empty() || n_delay * n_tx == 0 {
        return Err(Error::Config(
            "bits per entry needs streams and a nonempty channel".into(),
        ));
    }
    let entries = (n_delay * n_tx) as f64;
    Ok(streams
        .iter()
        .map(|s| s.len_bits() as f64 / entries)
        .sum::<f64>()
        / streams.len() as f64)
}

/// Predicted mean `ℓ(s)` per level from the model cross-entropy over a
/// calibration split, plus header, checksum and coder flush.
pub fn expected_bits_per_level(
    model: &CodecModel,
    calibration: &[ChannelTensor],
) -> Result<Vec<f64>> {
    if calibration.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let refs: Vec<&ChannelTensor> = calibration.iter().collect();
    let latents = analyze_batch(&refs, &model.transform)?;
    let overhead = 8.0 * BITSTREAM_HEADER_LEN as f64 + PAYLOAD_OVERHEAD_BITS;
    (0..model.ladder.n_levels())
        .map(|k| {
            let mut total = 0.0;
            for y in &latents {
                total += model_cross_entropy(&model.entropy, &quantize(y, &model.ladder, k)?)?;
            }
            Ok(overhead + total / latents.len() as f64)
        })
        .collect()
}

/// One point of a rate-distortion curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub model_id: String,
    pub lambda: f64,
    pub level: usize,
    pub bits_per_entry: f64,
    pub nmse: f64,
    pub nmse_db: f64,
}

pub const RD_CSV_HEADER: &str = "model_id,lambda,level,bits_per_entry,nmse,nmse_db";

/// Per-sample stream length and NMSE after a full serialize/parse/decode roundtrip.
fn measure(
    dataset: &[ChannelTensor],
    model: &CodecModel,
    level: usize,
) -> Result<Vec<(usize, f64)>> {
    dataset
        .iter()
        .map(|h| {
            let bytes = encode_csi(h, model, level)?.to_bytes()?;
            let h_hat = decode_csi_bytes(&bytes, model)?;
            Ok((8 * bytes.len(), nmse(h, &h_hat)?))
        })
        .collect()
}

fn measure_parallel(
    dataset: &[ChannelTensor],
    model: &CodecModel,
    level: usize,
) -> Result<Vec<(usize, f64)>> {
    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(dataset.len().max(1));
    let chunk = dataset.len().div_ceil(workers).max(1);
    thread::scope(|scope| {
        let handles: Vec<_> = dataset
            .chunks(chunk)
            .map(|part| scope.spawn(move || measure(part, model, level)))
            .collect();
        let mut out = Vec::with_capacity(dataset.len());
        for h in handles {
            out.extend(h.join().expect("sweep worker panicked")?);
        }
        Ok(out)
    })
}

/// Encodes every sample at every level of every requested λ's model.
///
/// Bits per entry are measured on the serialized streams and NMSE on the
/// decoded channels; means use a fixed sample order.
pub fn rd_sweep(
    dataset: &[ChannelTensor],
    models: &[CodecModel],
    lambdas: &[f64],
) -> Result<Vec<RdPoint>> {
    if dataset.is_empty() {
        return Err(Error::Config("sweep dataset is empty".into()));
    }
    let mut points = Vec::new();
    for &lambda in lambdas {
        let selected: Vec<&CodecModel> = models
            .iter()
            .filter(|m| (m.lambda - lambda).abs() <= 1e-12 * lambda.abs().max(1e-300))
            .collect();
        if selected.is_empty() {
            return Err(Error::Config(format!(
                "no model trained for lambda {lambda}"
            )));
        }
        for model in selected {
            let (n_delay, n_tx) = (model.transform.n_delay, model.transform.n_tx);
            for level in 0..model.ladder.n_levels() {
                let per_sample = measure_parallel(dataset, model, level)?;
                let n = per_sample.len() as f64;
                let bits = per_sample.iter().map(|p| p.0 as f64).sum::<f64>();
                let mean_nmse = per_sample.iter().map(|p| p.1).sum::<f64>() / n;
                points.push(RdPoint {
                    model_id: model.id.clone(),
                    lambda,
                    level,
                    bits_per_entry: bits / (n * (n_delay * n_tx) as f64),
                    nmse: mean_nmse,
                    nmse_db: 10.0 * mean_nmse.log10(),
                });
            }
        }
    }
    points.sort_by(|a, b| {
        a.bits_per_entry
            .total_cmp(&b.bits_per_entry)
            .then_with(|| a.model_id.cmp(&b.model_id))
            .then_with(|| a.lambda.total_cmp(&b.lambda))
            .then_with(|| a.level.cmp(&b.level))
    });
    Ok(points)
}

/// CSV with the frozen column order of [`RD_CSV_HEADER`].
pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut out = String::from(RD_CSV_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{:e},{},{:.6},{:.6e},{:.4}",
            p.model_id, p.lambda, p.level, p.bits_per_entry, p.nmse, p.nmse_db
        );
    }
    out
}
