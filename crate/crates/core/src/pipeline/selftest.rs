//! Quick invariant suite run by the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{decode_csi_bytes, encode_csi, reconstruct_in_process, CodecModel};
use crate::channel::{generate_dataset, ChannelConfig};
use crate::coder::{decode_symbols, encode_symbols, Payload};
use crate::entropy_model::{build_pmf_tables, EntropyModelParams, DEFAULT_TAIL_MASS};
use crate::error::Result;
use crate::quantizer::{
    aggregate_histogram, coarsen, empirical_entropy, histogram, quantize, quantize_value,
    LatentShape, LatentTensor, QuantLadder, SymbolTensor,
};
use crate::transform::{loss_and_gradients, Architecture, LossMode, TrainConfig, TransformParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: Result<(bool, String)>) -> Check {
    match result {
        Ok((passed, detail)) => Check {
            name,
            passed,
            detail,
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn nesting(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let ladder = QuantLadder::new(0.01, 6)?;
    let mut violations = 0;
    let trials = 10_000;
    for _ in 0..trials {
        let y = rng.random_range(-50.0..50.0);
        for k in 0..6 {
            let n = quantize_value(y, ladder.step(k))?;
            for j in 0..6 - k {
                if n >> j != quantize_value(y, ladder.step(k + j))? {
                    violations += 1;
                }
            }
        }
    }
    Ok((
        violations == 0,
        format!("{violations} violations over {trials} values"),
    ))
}

fn entropy_chain(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let ladder = QuantLadder::new(0.05, 6)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let shape = LatentShape::new(1, 1, 20_000);
    let y = LatentTensor::new(
        shape,
        (0..shape.len()).map(|_| normal.sample(rng)).collect(),
    )?;
    let fine = quantize(&y, &ladder, 0)?;
    let mut ok = true;
    let mut last = f64::INFINITY;
    let mut entropies = Vec::new();
    for k in 0..6 {
        let s = coarsen(&fine, k)?;
        let h = empirical_entropy(&s, false);
        ok &= h <= last;
        if k > 0 {
            let prev = coarsen(&fine, k - 1)?;
            ok &= aggregate_histogram(&histogram(&prev.symbols)) == histogram(&s.symbols);
        }
        entropies.push(format!("{h:.3}"));
        last = h;
    }
    Ok((ok, format!("bits/symbol by level: {}", entropies.join(" "))))
}

fn coder_roundtrip(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let ladder = QuantLadder::new(0.1, 4)?;
    let entropy = EntropyModelParams::new(vec![0.0, 0.3, -0.7], vec![0.0, -1.0, 0.5])?;
    let shape = LatentShape::new(3, 4, 5);
    let mut roundtrips = 0;
    let mut detected = 0;
    for k in 0..ladder.n_levels() {
        let tables = build_pmf_tables(&entropy, &ladder, k, DEFAULT_TAIL_MASS)?;
        for _ in 0..25 {
            let symbols = (0..shape.len())
                .map(|i| {
                    let t = &tables.tables[shape.channel_of(i)];
                    rng.random_range(t.n_min.max(-40)..=t.n_max().min(40))
                })
                .collect();
            let s = SymbolTensor::new(shape, symbols, k, ladder)?;
            let p = encode_symbols(&s, &tables)?;
            roundtrips += (decode_symbols(&p, &tables, shape, &ladder)? == s) as usize;
            let mut bytes = p.to_bytes();
            let at = rng.random_range(0..bytes.len());
            bytes[at] ^= rng.random_range(1..=255u8);
            let caught = Payload::from_bytes(&bytes, shape.len())
                .and_then(|q| decode_symbols(&q, &tables, shape, &ladder))
                .map_or(true, |d| d != s);
            detected += caught as usize;
        }
    }
    let total = 25 * ladder.n_levels();
    Ok((
        roundtrips == total && detected == total,
        format!("{roundtrips}/{total} roundtrips, {detected}/{total} mutations detected"),
    ))
}

fn gradient(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = ChannelConfig {
        n_tx: 4,
        n_subcarriers: 32,
        n_delay: 4,
        seed: rng.random(),
        n_paths: 3,
        decay: 0.5,
    };
    let data = generate_dataset(&cfg, 2)?;
    let batch: Vec<_> = data.iter().collect();
    let params = TransformParams::init(
        Architecture::Mlp {
            hidden: 6,
            latent_dim: 4,
        },
        4,
        4,
        rng.random(),
    )?;
    let entropy = EntropyModelParams::standard(4);
    let train_cfg = TrainConfig::new(0.1, 0.2);
    let loss = |p: &TransformParams| -> Result<_> {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        loss_and_gradients(&batch, p, &entropy, &train_cfg, LossMode::Noisy, &mut r)
    };
    let (base, grads) = loss(&params)?;
    let eps = 1e-5;
    let floor = 1e-6 * base.loss.abs().max(1.0);
    let mut worst: f64 = 0.0;
    for ti in 0..params.tensors.len() {
        let i = rng.random_range(0..params.tensors[ti].data.len());
        let mut plus = params.clone();
        plus.tensors[ti].data[i] += eps;
        let mut minus = params.clone();
        minus.tensors[ti].data[i] -= eps;
        let fd = (loss(&plus)?.0.loss - loss(&minus)?.0.loss) / (2.0 * eps);
        let an = grads.transform[ti][i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(floor));
    }
    Ok((worst <= 1e-4, format!("worst relative error {worst:.2e}")))
}

fn bitstream(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = ChannelConfig {
        n_tx: 4,
        n_subcarriers: 32,
        n_delay: 4,
        seed: rng.random(),
        n_paths: 3,
        decay: 0.5,
    };
    let data = generate_dataset(&cfg, 8)?;
    let model = CodecModel::new(
        "selftest",
        TransformParams::identity(4, 4),
        EntropyModelParams::new(vec![0.0; 2], vec![(0.2f64).ln(); 2])?,
        QuantLadder::new(0.01, 4)?,
        1.0,
    )?;
    let mut exact = 0;
    for h in &data {
        for k in 0..4 {
            let bytes = encode_csi(h, &model, k)?.to_bytes()?;
            exact += (decode_csi_bytes(&bytes, &model)? == reconstruct_in_process(h, &model, k)?)
                as usize;
        }
    }
    Ok((
        exact == 32,
        format!("{exact}/32 streams decode to the in-process reconstruction"),
    ))
}

/// Runs every check with a fixed seed.
pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    vec![
        check("nesting law", nesting(&mut rng)),
        check("entropy chain", entropy_chain(&mut rng)),
        check("lossless coding", coder_roundtrip(&mut rng)),
        check("gradient check", gradient(&mut rng)),
        check("bitstream roundtrip", bitstream(&mut rng)),
    ]
}
