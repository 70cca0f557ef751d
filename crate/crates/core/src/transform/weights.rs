//! Weight file: transform, entropy model, normalization and ladder in one blob.
//!
//! ```text
//! magic "CSIW" | version u8 | architecture tag u8 | n_delay u16 | n_tx u16
//! | latent C,H,W u16×3 | ladder levels u8 | architecture fields
//! | offset f64 | gain f64 | lambda f64 | base step f64 | tensor count u32
//! | tensors: name length u16, name utf-8, rank u8, dims u32×rank, f32 data
//! ```
//!
//! All integers and floats little-endian. Architecture fields: none for
//! identity; latent u32 for linear; hidden u32, latent u32 for mlp; patch,
//! heads, embed, window, mlp ratio, latent channels as u16 followed by stage
//! count u8 and depths u8×stages for swin_toy. The entropy model is the last
//! tensor, `entropy_model` with dims `[C, 2]` holding `(μ, ρ)` rows.

use std::io::{Read, Write};

use super::{Architecture, NamedTensor, SwinConfig, TransformParams};
use crate::channel::Normalization;
use crate::entropy_model::EntropyModelParams;
use crate::error::{Error, Result};
use crate::quantizer::QuantLadder;

pub const WEIGHT_MAGIC: &[u8; 4] = b"CSIW";
pub const WEIGHT_VERSION: u8 = 1;
const ENTROPY_TENSOR: &str = "entropy_model";

/// A trained codec model as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub transform: TransformParams,
    pub entropy: EntropyModelParams,
    pub scale: Normalization,
    pub lambda: f64,
    pub ladder: QuantLadder,
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 16 bits")))
}

fn to_u8(v: usize, what: &str) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 8 bits")))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 32 bits")))
}

impl WeightFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = &self.transform;
        let shape = t.latent_shape();
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.push(WEIGHT_VERSION);
        out.push(t.architecture.tag());
        out.extend_from_slice(&to_u16(t.n_delay, "n_delay")?.to_le_bytes());
        out.extend_from_slice(&to_u16(t.n_tx, "n_tx")?.to_le_bytes());
        for v in [shape.channels, shape.height, shape.width] {
            out.extend_from_slice(&to_u16(v, "latent dimension")?.to_le_bytes());
        }
        out.push(to_u8(self.ladder.n_levels(), "ladder levels")?);
        match &t.architecture {
            Architecture::Identity => {}
            Architecture::Linear { latent_dim } => {
                out.extend_from_slice(&to_u32(*latent_dim, "latent dimension")?.to_le_bytes());
            }
            Architecture::Mlp { hidden, latent_dim } => {
                out.extend_from_slice(&to_u32(*hidden, "hidden width")?.to_le_bytes());
                out.extend_from_slice(&to_u32(*latent_dim, "latent dimension")?.to_le_bytes());
            }
            Architecture::SwinToy(cfg) => {
                for v in [
                    cfg.patch_size,
                    cfg.heads,
                    cfg.embed_dim,
                    cfg.window,
                    cfg.mlp_ratio,
                    cfg.latent_channels,
                ] {
                    out.extend_from_slice(&to_u16(v, "swin field")?.to_le_bytes());
                }
                out.push(to_u8(cfg.depths.len(), "stage count")?);
                for &d in &cfg.depths {
                    out.push(to_u8(d, "stage depth")?);
                }
            }
        }
        for v in [
            self.scale.offset,
            self.scale.gain,
            self.lambda,
            self.ladder.base_step(),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&to_u32(t.tensors.len() + 1, "tensor count")?.to_le_bytes());
        let entropy_rows: Vec<f64> = self
            .entropy
            .loc
            .iter()
            .zip(&self.entropy.log_scale)
            .flat_map(|(&m, &r)| [m, r])
            .collect();
        let entropy_tensor = NamedTensor {
            name: ENTROPY_TENSOR.into(),
            dims: vec![self.entropy.channels(), 2],
            data: entropy_rows,
        };
        for tensor in t.tensors.iter().chain(std::iter::once(&entropy_tensor)) {
            let name = tensor.name.as_bytes();
            out.extend_from_slice(&to_u16(name.len(), "tensor name length")?.to_le_bytes());
            out.extend_from_slice(name);
            out.push(to_u8(tensor.dims.len(), "tensor rank")?);
            for &d in &tensor.dims {
                out.extend_from_slice(&to_u32(d, "tensor dimension")?.to_le_bytes());
            }
            for &v in &tensor.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut c = Cursor { data, pos: 0 };
        if c.take(4)? != WEIGHT_MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let version = c.u8()?;
        if version != WEIGHT_VERSION {
            return Err(Error::Format(format!(
                "unsupported weight file version {version}"
            )));
        }
        let tag = c.u8()?;
        let n_delay = c.u16()? as usize;
        let n_tx = c.u16()? as usize;
        let latent = [c.u16()? as usize, c.u16()? as usize, c.u16()? as usize];
        let n_levels = c.u8()? as usize;
        let architecture = match tag {
            0 => Architecture::Identity,
            1 => Architecture::Linear {
                latent_dim: c.u32()? as usize,
            },
            2 => Architecture::Mlp {
                hidden: c.u32()? as usize,
                latent_dim: c.u32()? as usize,
            },
            3 => {
                let mut f = [0usize; 6];
                for v in &mut f {
                    *v = c.u16()? as usize;
                }
                let stages = c.u8()? as usize;
                let depths = (0..stages)
                    .map(|_| c.u8().map(usize::from))
                    .collect::<Result<_>>()?;
                Architecture::SwinToy(SwinConfig {
                    patch_size: f[0],
                    heads: f[1],
                    embed_dim: f[2],
                    window: f[3],
                    mlp_ratio: f[4],
                    latent_channels: f[5],
                    depths,
                })
            }
            other => return Err(Error::Format(format!("unknown architecture tag {other}"))),
        };
        let offset = c.f64()?;
        let gain = c.f64()?;
        let lambda = c.f64()?;
        let base_step = c.f64()?;
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_string();
            let rank = c.u8()? as usize;
            let dims = (0..rank)
                .map(|_| c.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let raw = c.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if c.pos != data.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after weights",
                data.len() - c.pos
            )));
        }
        let entropy_tensor = match tensors.pop() {
            Some(t) if t.name == ENTROPY_TENSOR && t.dims.len() == 2 && t.dims[1] == 2 => t,
            _ => {
                return Err(Error::Format(
                    "weight file lacks the entropy model tensor".into(),
                ))
            }
        };
        let (loc, log_scale) = entropy_tensor
            .data
            .chunks_exact(2)
            .map(|r| (r[0], r[1]))
            .unzip();
        let entropy = EntropyModelParams::new(loc, log_scale)?;
        let transform = TransformParams::from_tensors(architecture, n_delay, n_tx, tensors)?;
        let shape = transform.latent_shape();
        if [shape.channels, shape.height, shape.width] != latent {
            return Err(Error::Format(format!(
                "declared latent {latent:?} does not match architecture latent {:?}",
                [shape.channels, shape.height, shape.width]
            )));
        }
        if entropy.channels() != shape.channels {
            return Err(Error::Format(format!(
                "entropy model has {} channels, latent has {}",
                entropy.channels(),
                shape.channels
            )));
        }
        let scale = Normalization::new(offset, gain).map_err(|e| Error::Format(e.to_string()))?;
        let ladder =
            QuantLadder::new(base_step, n_levels).map_err(|e| Error::Format(e.to_string()))?;
        if !lambda.is_finite() {
            return Err(Error::Format(format!("lambda {lambda} is not finite")));
        }
        Ok(Self {
            transform,
            entropy,
            scale,
            lambda,
            ladder,
        })
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| {
                Error::Truncated(format!("weight file ends at byte {}", self.data.len()))
            })?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
