//! Framed feedback bitstream.
//!
//! ```text
//! magic "CSIB" | version u8 | level u8 | latent C,H,W u16×3 (BE)
//! | offset f64 (BE) | gain f64 (BE) | payload length u32 (BE) | payload
//! ```
//!
//! The payload is the serialized coder output, CRC included.

use crate::channel::Normalization;
use crate::coder::Payload;
use crate::error::{Error, Result};
use crate::quantizer::LatentShape;

pub const BITSTREAM_MAGIC: &[u8; 4] = b"CSIB";
pub const BITSTREAM_VERSION: u8 = 1;
pub const BITSTREAM_HEADER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub level: u8,
    pub shape: LatentShape,
    pub scale: Normalization,
    pub payload: Payload,
}

impl Bitstream {
    /// `ℓ(s)` in bits: header plus payload.
    pub fn len_bits(&self) -> usize {
        8 * (BITSTREAM_HEADER_LEN + self.payload.serialized_len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload.to_bytes();
        let mut out = Vec::with_capacity(BITSTREAM_HEADER_LEN + payload.len());
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.push(BITSTREAM_VERSION);
        out.push(self.level);
        for v in [self.shape.channels, self.shape.height, self.shape.width] {
            let v = u16::try_from(v)
                .map_err(|_| Error::Format(format!("latent dimension {v} exceeds 16 bits")))?;
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.scale.offset.to_be_bytes());
        out.extend_from_slice(&self.scale.gain.to_be_bytes());
        let len = u32::try_from(payload.len())
            .map_err(|_| Error::Format("payload exceeds 4 GiB".into()))?;
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a stream and verifies the payload checksum.
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < BITSTREAM_HEADER_LEN {
            if data.len() >= 4 && &data[..4] != BITSTREAM_MAGIC {
                return Err(Error::Format("not a bitstream (bad magic)".into()));
            }
            return Err(Error::Truncated(format!(
                "bitstream of {} bytes is shorter than its {BITSTREAM_HEADER_LEN}-byte header",
                data.len()
            )));
        }
        if &data[..4] != BITSTREAM_MAGIC {
            return Err(Error::Format("not a bitstream (bad magic)".into()));
        }
        if data[4] != BITSTREAM_VERSION {
            return Err(Error::Format(format!(
                "unsupported bitstream version {}",
                data[4]
            )));
        }
        let level = data[5];
        let u16_at = |i: usize| u16::from_be_bytes([data[i], data[i + 1]]) as usize;
        let f64_at = |i: usize| f64::from_be_bytes(data[i..i + 8].try_into().unwrap());
        let shape = LatentShape::new(u16_at(6), u16_at(8), u16_at(10));
        let scale =
            Normalization::new(f64_at(12), f64_at(20)).map_err(|e| Error::Format(e.to_string()))?;
        let len = u32::from_be_bytes(data[28..32].try_into().unwrap()) as usize;
        let body = &data[BITSTREAM_HEADER_LEN..];
        if body.len() < len {
            return Err(Error::Truncated(format!(
                "payload declares {len} bytes, {} present",
                body.len()
            )));
        }
        if body.len() > len {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                body.len() - len
            )));
        }
        let payload = Payload::from_bytes(body, shape.len())?;
        Ok(Self {
            level,
            shape,
            scale,
            payload,
        })
    }
}
