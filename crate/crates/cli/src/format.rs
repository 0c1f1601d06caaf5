//! Binary recording files.
//!
//! Layout, all little-endian: `"SEMG"`, `u32` version = 1, `u32` channel
//! count, `u64` sample count, `f64` sample rate in Hz, then
//! `channels × samples` `f32` values, channel-major (all samples of channel 0
//! first).

use std::path::Path;

use nalgebra::DMatrix;
use spdsemg::graph::Recording;

use crate::error::{io_err, CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"SEMG";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8;

fn field<const N: usize>(bytes: &[u8], at: usize) -> [u8; N] {
    bytes[at..at + N].try_into().expect("header length checked")
}

pub fn decode_recording(bytes: &[u8]) -> CliResult<Recording> {
    if bytes.len() < HEADER_LEN {
        return Err(CliError::Format(format!("file too short for a header ({} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(CliError::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u32::from_le_bytes(field(bytes, 4));
    if version != VERSION {
        return Err(CliError::UnsupportedVersion(version));
    }
    let channels = u32::from_le_bytes(field(bytes, 8)) as usize;
    let samples = u64::from_le_bytes(field(bytes, 12));
    let rate = f64::from_le_bytes(field(bytes, 20));
    let expected = (channels as u128) * (samples as u128) * 4;
    let payload = (bytes.len() - HEADER_LEN) as u128;
    if payload != expected {
        return Err(CliError::Format(format!(
            "header declares {channels} channels × {samples} samples ({expected} bytes) but payload has {payload}"
        )));
    }
    let samples = samples as usize;
    let mut m = DMatrix::zeros(channels, samples);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        m[(k / samples, k % samples)] = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
    }
    Ok(Recording::new(rate, m)?)
}

/// Serializes `rec`, rounding samples to `f32`.
pub fn encode_recording(rec: &Recording) -> Vec<u8> {
    let (c, n) = (rec.channels(), rec.n_samples());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * c * n);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&rec.sample_rate.to_le_bytes());
    let s = rec.samples();
    for i in 0..c {
        for j in 0..n {
            out.extend_from_slice(&(s[(i, j)] as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_recording(path: &Path) -> CliResult<Recording> {
    decode_recording(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn write_recording(rec: &Recording, path: &Path) -> CliResult<()> {
    std::fs::write(path, encode_recording(rec)).map_err(io_err(path))
}
