//! Canonical channel tensor file (`CSIT`).
//!
//! Little-endian layout:
//!
//! | field   | type | notes                     |
//! |---------|------|---------------------------|
//! | magic   | 4 B  | `"CSIT"`                  |
//! | version | u8   | currently 1               |
//! | n_delay | u16  |                           |
//! | n_tx    | u16  |                           |
//! | count   | u32  |                           |
//! | offset  | f64  | normalization offset      |
//! | gain    | f64  | normalization gain        |
//!
//! followed by `count × 2 × n_delay × n_tx` f32 values in C order.

use std::io::{Read, Write};

use super::{ChannelTensor, Normalization};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CSIT";
pub const TENSOR_VERSION: u8 = 1;
pub const TENSOR_HEADER_LEN: usize = 29;

/// A batch of channel tensors sharing one shape and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub n_delay: usize,
    pub n_tx: usize,
    pub scale: Normalization,
    pub tensors: Vec<ChannelTensor>,
}

impl TensorFile {
    pub fn from_tensors(tensors: Vec<ChannelTensor>) -> Result<Self> {
        let first = tensors.first().ok_or_else(|| {
            Error::Config("cannot infer tensor file shape from an empty batch".into())
        })?;
        let (n_delay, n_tx, scale) = (first.n_delay, first.n_tx, first.scale);
        for t in &tensors {
            if t.n_delay != n_delay || t.n_tx != n_tx {
                return Err(Error::Dimension(
                    "tensors in one file must share a shape".into(),
                ));
            }
            if t.scale != scale {
                return Err(Error::Format(
                    "tensors in one file must share a normalization".into(),
                ));
            }
        }
        Ok(Self {
            n_delay,
            n_tx,
            scale,
            tensors,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.n_delay > u16::MAX as usize || self.n_tx > u16::MAX as usize {
            return Err(Error::Format("tensor dimensions exceed 16 bits".into()));
        }
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Format("too many tensors for one file".into()))?;
        let mut header = Vec::with_capacity(TENSOR_HEADER_LEN);
        header.extend_from_slice(TENSOR_MAGIC);
        header.push(TENSOR_VERSION);
        header.extend_from_slice(&(self.n_delay as u16).to_le_bytes());
        header.extend_from_slice(&(self.n_tx as u16).to_le_bytes());
        header.extend_from_slice(&count.to_le_bytes());
        header.extend_from_slice(&self.scale.offset.to_le_bytes());
        header.extend_from_slice(&self.scale.gain.to_le_bytes());
        w.write_all(&header)?;

        let per = 2 * self.n_delay * self.n_tx;
        let mut body = Vec::with_capacity(per * 4);
        for t in &self.tensors {
            if t.planes.len() != per {
                return Err(Error::Dimension("tensor does not match file shape".into()));
            }
            body.clear();
            for &v in &t.planes {
                body.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&body)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; TENSOR_HEADER_LEN];
        read_exact_or_truncated(&mut r, &mut header, "tensor file header")?;
        if &header[0..4] != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor file magic".into()));
        }
        if header[4] != TENSOR_VERSION {
            return Err(Error::Format(format!(
                "unsupported tensor file version {}",
                header[4]
            )));
        }
        let n_delay = u16::from_le_bytes([header[5], header[6]]) as usize;
        let n_tx = u16::from_le_bytes([header[7], header[8]]) as usize;
        let count = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
        let offset = f64::from_le_bytes(header[13..21].try_into().unwrap());
        let gain = f64::from_le_bytes(header[21..29].try_into().unwrap());
        let scale = Normalization::new(offset, gain).map_err(|e| Error::Format(e.to_string()))?;

        let per = 2 * n_delay * n_tx;
        let mut buf = vec![0u8; per * 4];
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            read_exact_or_truncated(&mut r, &mut buf, &format!("tensor {i} of {count}"))?;
            let planes = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            tensors.push(ChannelTensor::new(n_delay, n_tx, planes, scale)?);
        }
        Ok(Self {
            n_delay,
            n_tx,
            scale,
            tensors,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("{what} is incomplete")),
        _ => Error::Io(e),
    })
}
