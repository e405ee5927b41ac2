//! Binary containers shared by datasets, weight files and map exports.
//!
//! * `SSEG`: 16-byte header `b"SSEG" | u32 H | u32 W | u32 C` (little
//!   endian) followed by `C*H*W` little-endian `f32`, row-major `(C,H,W)`.
//! * `SMSK`: 12-byte header `b"SMSK" | u32 H | u32 W` followed by `H*W` bytes.
//! * binary PGM (`P5`) for 8-bit grayscale map export.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const SSEG_MAGIC: &[u8; 4] = b"SSEG";
pub const SMSK_MAGIC: &[u8; 4] = b"SMSK";
pub const SSEG_HEADER: usize = 16;
pub const SMSK_HEADER: usize = 12;

/// Dimensions stored in an `SSEG` header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsegDims {
    pub h: u32,
    pub w: u32,
    pub c: u32,
}

impl SsegDims {
    pub fn count(self) -> usize {
        self.c as usize * self.h as usize * self.w as usize
    }
}

pub fn encode_sseg(dims: SsegDims, values: &[f32], out: &mut Vec<u8>) {
    debug_assert_eq!(dims.count(), values.len());
    out.extend_from_slice(SSEG_MAGIC);
    out.extend_from_slice(&dims.h.to_le_bytes());
    out.extend_from_slice(&dims.w.to_le_bytes());
    out.extend_from_slice(&dims.c.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one `SSEG` record from the front of `bytes`, returning the
/// values and the number of bytes consumed. `what` names the record in errors.
pub fn decode_sseg(bytes: &[u8], what: &Path) -> Result<(SsegDims, Vec<f32>, usize)> {
    if bytes.len() < SSEG_HEADER {
        return Err(Error::data(what, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != SSEG_MAGIC {
        return Err(Error::data(what, "bad magic, expected SSEG"));
    }
    let dims = SsegDims { h: le_u32(&bytes[4..8]), w: le_u32(&bytes[8..12]), c: le_u32(&bytes[12..16]) };
    let need = SSEG_HEADER + 4 * dims.count();
    if bytes.len() < need {
        return Err(Error::data(what, format!("truncated payload: need {need} bytes, have {}", bytes.len())));
    }
    let values =
        bytes[SSEG_HEADER..need].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((dims, values, need))
}

pub fn encode_smsk(h: u32, w: u32, mask: &[u8]) -> Vec<u8> {
    debug_assert_eq!(h as usize * w as usize, mask.len());
    let mut out = Vec::with_capacity(SMSK_HEADER + mask.len());
    out.extend_from_slice(SMSK_MAGIC);
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(mask);
    out
}

pub fn decode_smsk(bytes: &[u8], what: &Path) -> Result<(u32, u32, Vec<u8>)> {
    if bytes.len() < SMSK_HEADER {
        return Err(Error::data(what, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != SMSK_MAGIC {
        return Err(Error::data(what, "bad magic, expected SMSK"));
    }
    let (h, w) = (le_u32(&bytes[4..8]), le_u32(&bytes[8..12]));
    let n = h as usize * w as usize;
    if bytes.len() != SMSK_HEADER + n {
        return Err(Error::data(what, format!("expected {} bytes, have {}", SMSK_HEADER + n, bytes.len())));
    }
    Ok((h, w, bytes[SMSK_HEADER..].to_vec()))
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Binary PGM: header `P5 <W> <H> 255\n` then `H*W` bytes.
pub fn encode_pgm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(w * h, pixels.len());
    let mut out = Vec::with_capacity(pixels.len() + 20);
    writeln!(out, "P5 {w} {h} 255").expect("write to Vec");
    out.extend_from_slice(pixels);
    out
}

/// Quantizes values in `[0,1]` to 8 bits (`round(v*255)`).
pub fn quantize_unit(values: &[f32]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
