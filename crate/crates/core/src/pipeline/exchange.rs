//! Plain-text symbol and PMF files for external rate checks.
//!
//! Symbol file:
//!
//! ```text
//! # csi-ntc symbols v1
//! channels <C>
//! channel 0
//! <integer per line>
//! channel 1
//! ...
//! ```
//!
//! PMF file, one probability per line from `n_min` upward:
//!
//! ```text
//! # csi-ntc pmf v1
//! channels <C>
//! channel 0 n_min <n>
//! <probability per line>
//! ...
//! ```
//!
//! Probabilities are the coder's integer frequencies divided by `2^16`,
//! printed exactly. Blank lines and further `#` lines are ignored.

use std::fmt::Write as _;

use crate::entropy_model::{PmfTables, PMF_TOTAL};
use crate::error::{Error, Result};
use crate::quantizer::SymbolTensor;

pub const SYMBOL_HEADER: &str = "# csi-ntc symbols v1";
pub const PMF_HEADER: &str = "# csi-ntc pmf v1";

pub fn write_symbols(s: &SymbolTensor) -> String {
    let mut out = format!("{SYMBOL_HEADER}\nchannels {}\n", s.shape.channels);
    for c in 0..s.shape.channels {
        let _ = writeln!(out, "channel {c}");
        for n in s.channel(c) {
            let _ = writeln!(out, "{n}");
        }
    }
    out
}

pub fn write_pmf(tables: &PmfTables) -> String {
    let mut out = format!("{PMF_HEADER}\nchannels {}\n", tables.channels());
    for (c, t) in tables.tables.iter().enumerate() {
        let _ = writeln!(out, "channel {c} n_min {}", t.n_min);
        for f in &t.freqs {
            let _ = writeln!(out, "{}", *f as f64 / PMF_TOTAL as f64);
        }
    }
    out
}

/// One channel of a parsed exchange file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeChannel<T> {
    pub n_min: Option<i32>,
    pub values: Vec<T>,
}

fn parse<T: std::str::FromStr>(text: &str, header: &str) -> Result<Vec<ExchangeChannel<T>>> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .enumerate()
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == header => {}
        _ => return Err(Error::Format(format!("missing header {header:?}"))),
    }
    let declared: usize = match lines.next().and_then(|(_, l)| l.strip_prefix("channels ")) {
        Some(n) => n
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad channel count {n:?}")))?,
        None => return Err(Error::Format("missing channel count".into())),
    };
    let mut channels: Vec<ExchangeChannel<T>> = Vec::new();
    for (i, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("channel ") {
            let mut parts = rest.split_whitespace();
            let index: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("line {}: bad channel line", i + 1)))?;
            if index != channels.len() {
                return Err(Error::Format(format!(
                    "line {}: channel {index} out of order",
                    i + 1
                )));
            }
            let n_min = match (parts.next(), parts.next()) {
                (Some("n_min"), Some(v)) => Some(
                    v.parse()
                        .map_err(|_| Error::Format(format!("line {}: bad n_min {v:?}", i + 1)))?,
                ),
                (None, None) => None,
                _ => return Err(Error::Format(format!("line {}: bad channel line", i + 1))),
            };
            channels.push(ExchangeChannel {
                n_min,
                values: vec![],
            });
            continue;
        }
        let current = channels
            .last_mut()
            .ok_or_else(|| Error::Format(format!("line {}: value before any channel", i + 1)))?;
        current.values.push(
            line.parse()
                .map_err(|_| Error::Format(format!("line {}: cannot parse {line:?}", i + 1)))?,
        );
    }
    if channels.len() != declared {
        return Err(Error::Format(format!(
            "header declares {declared} channels, found {}",
            channels.len()
        )));
    }
    Ok(channels)
}

pub fn read_symbols(text: &str) -> Result<Vec<Vec<i32>>> {
    Ok(parse::<i32>(text, SYMBOL_HEADER)?
        .into_iter()
        .map(|c| c.values)
        .collect())
}

/// Channels as `(n_min, probabilities)`.
pub fn read_pmf(text: &str) -> Result<Vec<(i32, Vec<f64>)>> {
    parse::<f64>(text, PMF_HEADER)?
        .into_iter()
        .map(|c| {
            let n_min = c
                .n_min
                .ok_or_else(|| Error::Format("pmf channel lacks n_min".into()))?;
            Ok((n_min, c.values))
        })
        .collect()
}
