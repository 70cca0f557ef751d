//! rANS entropy coder over 16-bit frequency tables.
//!
//! 32-bit state, byte-wise renormalization with lower bound `2^23`. Symbols
//! are pushed in reverse raster order so the decoder pops them forward; each
//! entry uses the table of its channel (channel-major raster order).
//!
//! Serialized payload layout:
//!
//! ```text
//! [final state: u32 big-endian][renormalization bytes in decode order][CRC-32: u32 big-endian]
//! ```
//!
//! The CRC covers everything before it.

use crate::entropy_model::{PmfTables, PMF_PRECISION};
use crate::error::{Error, Result};
use crate::quantizer::{LatentShape, QuantLadder, SymbolTensor};

const RANS_LOWER: u32 = 1 << 23;
const SLOT_MASK: u32 = (1 << PMF_PRECISION) - 1;

/// Entropy-coded symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    /// Final state followed by renormalization bytes (CRC excluded).
    pub bytes: Vec<u8>,
    pub symbol_count: usize,
    pub checksum: u32,
}

impl Payload {
    /// Length of the serialized payload in bytes, CRC included.
    pub fn serialized_len(&self) -> usize {
        self.bytes.len() + 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&self.bytes);
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out
    }

    /// Parses a serialized payload and verifies its CRC.
    pub fn from_bytes(data: &[u8], symbol_count: usize) -> Result<Self> {
        if data.len() < 8 {
            return Err(Error::Truncated(format!(
                "payload of {} bytes is shorter than state + checksum",
                data.len()
            )));
        }
        let (bytes, crc) = data.split_at(data.len() - 4);
        let stored = u32::from_be_bytes(crc.try_into().unwrap());
        let computed = crc32fast::hash(bytes);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(Self {
            bytes: bytes.to_vec(),
            symbol_count,
            checksum: stored,
        })
    }
}

fn table_for<'a>(
    tables: &'a PmfTables,
    shape: &LatentShape,
    i: usize,
) -> Result<&'a crate::entropy_model::PmfTable> {
    let c = shape.channel_of(i);
    tables
        .tables
        .get(c)
        .ok_or_else(|| Error::Dimension(format!("no table for channel {c}")))
}

pub fn encode_symbols(s: &SymbolTensor, tables: &PmfTables) -> Result<Payload> {
    if s.shape.channels != tables.channels() && !s.symbols.is_empty() {
        return Err(Error::Dimension(format!(
            "{} symbol channels but {} tables",
            s.shape.channels,
            tables.channels()
        )));
    }
    let mut state: u32 = RANS_LOWER;
    let mut emitted: Vec<u8> = Vec::with_capacity(s.symbols.len() / 2 + 8);
    for i in (0..s.symbols.len()).rev() {
        let n = s.symbols[i];
        let table = table_for(tables, &s.shape, i)?;
        if !table.contains(n) {
            return Err(Error::CoderDomain {
                channel: s.shape.channel_of(i),
                symbol: n,
                min: table.n_min,
                max: table.n_max(),
            });
        }
        let (start, freq) = table.interval(n);
        let x_max = ((RANS_LOWER >> PMF_PRECISION) << 8) as u64 * freq as u64;
        while state as u64 >= x_max {
            emitted.push(state as u8);
            state >>= 8;
        }
        state = ((state / freq) << PMF_PRECISION) + (state % freq) + start;
    }
    let mut bytes = Vec::with_capacity(emitted.len() + 4);
    bytes.extend_from_slice(&state.to_be_bytes());
    bytes.extend(emitted.iter().rev());
    let checksum = crc32fast::hash(&bytes);
    Ok(Payload {
        bytes,
        symbol_count: s.symbols.len(),
        checksum,
    })
}

pub fn decode_symbols(
    p: &Payload,
    tables: &PmfTables,
    shape: LatentShape,
    ladder: &QuantLadder,
) -> Result<SymbolTensor> {
    let computed = crc32fast::hash(&p.bytes);
    if computed != p.checksum {
        return Err(Error::Checksum {
            stored: p.checksum,
            computed,
        });
    }
    if p.symbol_count != shape.len() {
        return Err(Error::Dimension(format!(
            "payload holds {} symbols, shape needs {}",
            p.symbol_count,
            shape.len()
        )));
    }
    if shape.channels != tables.channels() && !shape.is_empty() {
        return Err(Error::Dimension(format!(
            "{} channels but {} tables",
            shape.channels,
            tables.channels()
        )));
    }
    let data = &p.bytes;
    if data.len() < 4 {
        return Err(Error::Truncated("payload lacks the rANS state".into()));
    }
    let mut state = u32::from_be_bytes(data[..4].try_into().unwrap());
    if state < RANS_LOWER {
        return Err(Error::Format(format!(
            "rANS state {state:#x} below lower bound"
        )));
    }
    let mut pos = 4;
    let mut symbols = Vec::with_capacity(shape.len());
    for i in 0..shape.len() {
        let table = table_for(tables, &shape, i)?;
        let slot = state & SLOT_MASK;
        let n = table.symbol_for_slot(slot);
        let (start, freq) = table.interval(n);
        state = freq * (state >> PMF_PRECISION) + slot - start;
        while state < RANS_LOWER {
            let byte = *data.get(pos).ok_or_else(|| {
                Error::Truncated(format!(
                    "payload exhausted after {i} of {} symbols",
                    shape.len()
                ))
            })?;
            state = (state << 8) | byte as u32;
            pos += 1;
        }
        symbols.push(n);
    }
    if state != RANS_LOWER || pos != data.len() {
        return Err(Error::Format(
            "payload did not unwind to the initial rANS state; tables or shape differ from the encoder's".into(),
        ));
    }
    SymbolTensor::new(shape, symbols, tables.level, *ladder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_model::{PmfTable, PMF_TOTAL};

    fn uniform4() -> PmfTables {
        PmfTables {
            level: 0,
            step: 1.0,
            tables: vec![PmfTable::from_frequencies(0, vec![PMF_TOTAL / 4; 4]).unwrap()],
        }
    }

    fn ladder() -> QuantLadder {
        QuantLadder::new(1.0, 4).unwrap()
    }

    #[test]
    fn empty_tensor() {
        let shape = LatentShape::new(1, 0, 0);
        let s = SymbolTensor::new(shape, vec![], 0, ladder()).unwrap();
        let p = encode_symbols(&s, &uniform4()).unwrap();
        assert_eq!(p.serialized_len(), 8);
        assert_eq!(p.bytes, RANS_LOWER.to_be_bytes().to_vec());
        let back = decode_symbols(&p, &uniform4(), shape, &ladder()).unwrap();
        assert!(back.symbols.is_empty());
    }

    #[test]
    fn out_of_range_symbol_is_an_error() {
        let shape = LatentShape::new(1, 1, 3);
        let s = SymbolTensor::new(shape, vec![0, 4, 1], 0, ladder()).unwrap();
        assert!(matches!(
            encode_symbols(&s, &uniform4()),
            Err(Error::CoderDomain { symbol: 4, .. })
        ));
    }

    #[test]
    fn degenerate_alphabet_costs_nothing() {
        let tables = PmfTables {
            level: 0,
            step: 1.0,
            tables: vec![PmfTable::from_frequencies(-3, vec![PMF_TOTAL]).unwrap()],
        };
        let shape = LatentShape::new(1, 10, 10);
        let s = SymbolTensor::new(shape, vec![-3; 100], 0, ladder()).unwrap();
        let p = encode_symbols(&s, &tables).unwrap();
        assert_eq!(p.bytes.len(), 4);
        assert_eq!(decode_symbols(&p, &tables, shape, &ladder()).unwrap(), s);
    }

    #[test]
    fn truncated_stream_with_valid_crc() {
        let shape = LatentShape::new(1, 1, 64);
        let s = SymbolTensor::new(shape, (0..64).map(|i| i % 4).collect(), 0, ladder()).unwrap();
        let mut p = encode_symbols(&s, &uniform4()).unwrap();
        p.bytes.truncate(p.bytes.len() - 3);
        p.checksum = crc32fast::hash(&p.bytes);
        assert!(matches!(
            decode_symbols(&p, &uniform4(), shape, &ladder()),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn short_serialized_payload() {
        assert!(matches!(
            Payload::from_bytes(&[0; 7], 0),
            Err(Error::Truncated(_))
        ));
    }
}
