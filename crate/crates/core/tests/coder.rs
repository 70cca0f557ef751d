use csi_ntc::coder::{decode_symbols, encode_symbols, Payload};
use csi_ntc::entropy_model::{
    build_pmf_tables, EntropyModelParams, PmfTable, PmfTables, DEFAULT_TAIL_MASS, PMF_TOTAL,
};
use csi_ntc::quantizer::{LatentShape, QuantLadder, SymbolTensor};
use csi_ntc::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single_table(n_min: i32, freqs: Vec<u32>) -> PmfTables {
    PmfTables {
        level: 0,
        step: 1.0,
        tables: vec![PmfTable::from_frequencies(n_min, freqs).unwrap()],
    }
}

fn row(symbols: Vec<i32>) -> SymbolTensor {
    let ladder = QuantLadder::new(1.0, 1).unwrap();
    SymbolTensor::new(LatentShape::new(1, 1, symbols.len()), symbols, 0, ladder).unwrap()
}

fn ideal_bits(s: &SymbolTensor, tables: &PmfTables) -> f64 {
    s.symbols
        .iter()
        .map(|&n| -tables.tables[0].probability(n).log2())
        .sum()
}

#[test]
fn golden_payloads() {
    // uniform over four symbols; encoding 2 then 1 from the initial state 2^23 needs no renormalization:
    // 2^23 -> 2^25 + 32768 -> 2^27 + 2^17 + 16384
    let tables = single_table(0, vec![PMF_TOTAL / 4; 4]);
    let p = encode_symbols(&row(vec![1, 2]), &tables).unwrap();
    assert_eq!(p.bytes, vec![0x08, 0x02, 0x40, 0x00]);
    assert_eq!(p.checksum, crc32fast::hash(&p.bytes));
    let mut serialized = p.bytes.clone();
    serialized.extend_from_slice(&crc32fast::hash(&p.bytes).to_be_bytes());
    assert_eq!(p.to_bytes(), serialized);

    // a frequency-1 symbol forces two renormalization bytes: 2^23 -> 128 -> 128·2^16 + 65535
    let skewed = single_table(0, vec![PMF_TOTAL - 1, 1]);
    let p = encode_symbols(&row(vec![1]), &skewed).unwrap();
    assert_eq!(p.bytes, vec![0x00, 0x80, 0xFF, 0xFF, 0x00, 0x00]);
    let ladder = QuantLadder::new(1.0, 1).unwrap();
    assert_eq!(
        decode_symbols(&p, &skewed, LatentShape::new(1, 1, 1), &ladder).unwrap(),
        row(vec![1])
    );
}

#[test]
fn uniform_four_symbols_cost_two_bits_each() {
    let tables = single_table(-2, vec![PMF_TOTAL / 4; 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = row((0..1024).map(|_| rng.random_range(-2..2)).collect());
    assert_eq!(ideal_bits(&s, &tables), 2048.0);
    let bits = 8 * encode_symbols(&s, &tables).unwrap().bytes.len();
    assert!((2048..=2048 + 64).contains(&bits), "{bits} bits");
}

#[test]
fn skewed_binary_source_approaches_its_entropy() {
    let tables = single_table(0, vec![58_982, 6_554]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let count = 100_000;
    let s = row((0..count).map(|_| rng.random_bool(0.1) as i32).collect());
    let bits = 8 * encode_symbols(&s, &tables).unwrap().bytes.len();
    let per_symbol = bits as f64 / count as f64;
    assert!(per_symbol <= 0.49, "{per_symbol} bits/symbol");
    let ideal = ideal_bits(&s, &tables);
    assert!(bits as f64 <= ideal + 32.0 + 1e-3 * ideal);
}

#[test]
fn every_single_byte_mutation_is_a_checksum_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = EntropyModelParams::new(vec![0.0, 0.4], vec![-1.0, 0.5]).unwrap();
    let ladder = QuantLadder::new(0.1, 3).unwrap();
    let shape = LatentShape::new(2, 3, 4);
    let mut mutations = 0;
    while mutations < 10_000 {
        let k = rng.random_range(0..3);
        let tables = build_pmf_tables(&params, &ladder, k, DEFAULT_TAIL_MASS).unwrap();
        let symbols = (0..shape.len())
            .map(|i| {
                let t = &tables.tables[shape.channel_of(i)];
                t.symbol_for_slot(rng.random_range(0..PMF_TOTAL))
            })
            .collect();
        let s = SymbolTensor::new(shape, symbols, k, ladder).unwrap();
        let bytes = encode_symbols(&s, &tables).unwrap().to_bytes();
        for _ in 0..100 {
            let mut mutated = bytes.clone();
            let at = rng.random_range(0..mutated.len());
            mutated[at] ^= rng.random_range(1..=255u8);
            let result = Payload::from_bytes(&mutated, shape.len());
            assert!(
                matches!(result, Err(Error::Checksum { .. })),
                "mutation at {at} not caught"
            );
            mutations += 1;
        }
    }
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let params = EntropyModelParams::new(vec![0.2], vec![0.0]).unwrap();
    let ladder = QuantLadder::new(0.05, 2).unwrap();
    let tables = build_pmf_tables(&params, &ladder, 1, DEFAULT_TAIL_MASS).unwrap();
    let s = SymbolTensor::new(
        LatentShape::new(1, 2, 3),
        vec![0, 1, -1, 5, -7, 2],
        1,
        ladder,
    )
    .unwrap();
    assert_eq!(
        encode_symbols(&s, &tables).unwrap(),
        encode_symbols(&s, &tables).unwrap()
    );
}

/// Channels, height, width, per-channel (loc, log-scale), base step, level, seed.
type Case = (usize, usize, usize, Vec<(f64, f64)>, f64, usize, u64);

fn case() -> impl Strategy<Value = Case> {
    (1usize..=4, 1usize..=4, 1usize..=6).prop_flat_map(|(c, h, w)| {
        (
            Just(c),
            Just(h),
            Just(w),
            prop::collection::vec((-2.0f64..2.0, -3.0f64..1.5), c),
            0.02f64..1.0,
            0usize..5,
            any::<u64>(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn roundtrip_is_lossless((c, h, w, channels, base, level, seed) in case()) {
        let params = EntropyModelParams::new(
            channels.iter().map(|p| p.0).collect(),
            channels.iter().map(|p| p.1).collect(),
        ).unwrap();
        let ladder = QuantLadder::new(base, 5).unwrap();
        let tables = build_pmf_tables(&params, &ladder, level, DEFAULT_TAIL_MASS).unwrap();
        let shape = LatentShape::new(c, h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let symbols = (0..shape.len())
            .map(|i| {
                let t = &tables.tables[shape.channel_of(i)];
                if rng.random_bool(0.2) {
                    rng.random_range(t.n_min..=t.n_max())
                } else {
                    t.symbol_for_slot(rng.random_range(0..PMF_TOTAL))
                }
            })
            .collect();
        let s = SymbolTensor::new(shape, symbols, level, ladder).unwrap();
        let p = encode_symbols(&s, &tables).unwrap();
        let parsed = Payload::from_bytes(&p.to_bytes(), shape.len()).unwrap();
        prop_assert_eq!(decode_symbols(&parsed, &tables, shape, &ladder).unwrap(), s);
    }
}
